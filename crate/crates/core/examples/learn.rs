use std::time::Instant;

use targ_core::corpus::{generate_synthetic, SyntheticConfig, Vocabulary};
use targ_core::model::{ModelConfig, TargModel};
use targ_core::training::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);

    let syn = SyntheticConfig {
        topics: 6,
        factoids_per_topic: 5,
        n_dialogues: 600,
        turns_per_dialogue: 4,
        shift_prob: 0.4,
        ungrounded_prob: 0.15,
        wide_span_prob: 0.1,
        seed,
    };
    let t0 = Instant::now();
    let (corpus, stats) = generate_synthetic(&syn).unwrap();
    println!("corpus: {} dialogues, M={}, gold changes/dlg={:.3}",
        corpus.dialogues.len(), corpus.m_total(), stats.mean_changes_per_dialogue());
    let vocab = Vocabulary::build(&corpus, 15);
    println!("vocab: {} tokens", vocab.len());
    let (train_c, dev_c) = corpus.split_off_dev(100).unwrap();

    let mc = ModelConfig::desk();
    let mut model = TargModel::new(mc, vocab, seed).unwrap();
    println!("params: {} tensors, {} values", model.store.len(), model.store.total_values());

    let mut tc = TrainConfig::desk(seed);
    tc.epochs = epochs;
    if let Some(ab) = args.get(3) {
        tc.ablation = ab.parse().unwrap();
        let mut mc2 = model.config.clone();
        tc.ablation.apply(&mut mc2);
        model = TargModel::new(mc2, model.vocab.clone(), seed).unwrap();
        println!("ablation: {}", tc.ablation.name());
    }
    let t1 = Instant::now();
    let outcome = train(&mut model, &train_c, &dev_c, &tc, Some(&mut |log: &targ_core::training::EpochLog| {
        let dev = log.dev.map(|d| format!("em={:.3} f1={:.3} bleu4={:.3}", d.em, d.token_f1, d.bleu4)).unwrap_or_default();
        println!("epoch {}: L={:.4} Ls={:.4} Lg={:.4} {} [{:.1}s]",
            log.epoch, log.loss, log.loss_s, log.loss_g, dev, t1.elapsed().as_secs_f64());
    })).unwrap();
    println!("best epoch {} dev EM {:.3}; train {:.1}s, setup {:.1}s",
        outcome.best_epoch, outcome.best_dev_em, t1.elapsed().as_secs_f64(), (t1 - t0).as_secs_f64());
}
