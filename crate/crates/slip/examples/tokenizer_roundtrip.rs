//! Trains a byte-pair vocabulary on a tiny corpus, shows the merge
//! order, and demonstrates exact round-tripping plus the BOS/EOS/PAD
//! framing used by the text encoder.
//!
//! ```bash
//! cargo run --release -p slip --example tokenizer_roundtrip
//! ```

use slip::datapipe::bpe::{bpe_encode, bpe_train, BpeVocab};

fn main() {
    let corpus: Vec<String> = [
        "a photo of a small red square in the top left",
        "an image of a big blue circle on the right",
        "a picture showing a green triangle in the middle",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();

    let vocab = bpe_train(&corpus, 300).expect("train");
    println!("vocab size {}, {} merges; first ten merges:", vocab.vocab_size(), vocab.merges().len());
    for &(l, r) in vocab.merges().iter().take(10) {
        println!(
            "  {:?} + {:?}",
            String::from_utf8_lossy(vocab.bytes_of(l).unwrap()),
            String::from_utf8_lossy(vocab.bytes_of(r).unwrap())
        );
    }

    for text in ["a photo of a red square", "unseen words work too: crème brûlée"] {
        let ids = vocab.encode_bytes(text);
        assert_eq!(vocab.decode(&ids), text);
        println!("{text:?} -> {} tokens, round-trips exactly", ids.len());
    }

    let framed = bpe_encode("a photo of a red square", &vocab, 16);
    println!("framed ids: {:?} (eos at {})", framed.ids, framed.eos_position);

    let bytes_only = BpeVocab::bytes_only();
    let ids = bytes_only.encode_bytes("byte fallback never fails \u{1F60A}");
    assert_eq!(bytes_only.decode(&ids), "byte fallback never fails \u{1F60A}");
    println!("byte-level fallback round-trips emoji too");
}
