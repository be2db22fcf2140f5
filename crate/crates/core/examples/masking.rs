//! Encoder and decoder views of one pre-training example, and how often
//! TF-IDF masking hits each token of a passage.

mod common;

use std::collections::BTreeMap;

use mtmae::masking::{assemble_pretrain_example, mask_tfidf, MaskedView};
use mtmae::rng;
use mtmae::textcorpus::Vocab;

fn show(vocab: &Vocab, v: &MaskedView) -> String {
    vocab.decode(&v.input_tokens)
}

fn main() {
    let (dir, _tmp) = common::out_dir();
    let ws = common::small_workspace(&dir, 0);
    let art = &ws.art;
    let pair = &art.pairs[0];
    let mut r = rng::stream(0, &["example", "masking"]);
    let ex = assemble_pretrain_example(pair, &art.plm, &ws.cfg.masking, &art.tfidf, &mut r).expect("example");
    println!("passage  {}", art.vocab.decode(&pair.left.token_ids));
    println!("encoder  {}", show(&art.vocab, &ex.encoder_view));
    for (task, view) in &ex.decoder_views {
        println!("{:<8} {}", task.name(), show(&art.vocab, view));
    }

    let seq = &pair.left.token_ids;
    let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
    let draws = 5000;
    for _ in 0..draws {
        let v = mask_tfidf(seq, ws.cfg.masking.beta, &art.tfidf, &mut r).expect("mask");
        for &i in &v.masked_positions {
            *hits.entry(i).or_default() += 1;
        }
    }
    let weights = art.tfidf.position_weights(seq);
    println!("\nposition token        tfidf  mask rate");
    for (i, &t) in seq.iter().enumerate() {
        let rate = hits.get(&i).copied().unwrap_or(0) as f64 / draws as f64;
        println!("{i:>8} {:<12} {:>6.3} {rate:>10.3}", art.vocab.token(t).unwrap_or("?"), weights[i]);
    }
}
