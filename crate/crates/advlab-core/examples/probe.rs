//! Dev scaffolding: prints frozen constants for conformance vectors.
use advlab_core::data::{token_id, vocab_hash, TokenSeq};

fn main() {
    println!("vocab_hash = 0x{:016x}", vocab_hash());
    for w in ["red", "circle", "a", "photo"] {
        println!("{w} = {}", token_id(w).unwrap());
    }
    let t = TokenSeq::tokenize("red circle").unwrap();
    println!("tokenize(red circle).ids = {:?}", t.ids);
}
