use dedetr::config::RunConfig;
use dedetr::train::*;
use std::time::Instant;
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args[1].parse().unwrap();
    let seed: u64 = args[2].parse().unwrap();
    let which: Vec<&str> = args[3].split(',').collect();
    for w in which {
        let mut cfg = RunConfig::default();
        cfg.config_id = w.to_string();
        cfg.seed = seed;
        cfg.optim.epochs = epochs;
        let env = |k: &str| std::env::var(k).ok();
        if let Some(b) = env("D") { let d: usize = b.parse().unwrap(); cfg.model.hidden_dim = d; cfg.model.ffn_dim = 4 * d; }
        if let Some(b) = env("ENC") { cfg.model.enc_layers = b.parse().unwrap(); }
        if let Some(b) = env("N") { cfg.model.num_queries = b.parse().unwrap(); }
        if let Some(b) = env("B") { cfg.optim.batch_size = b.parse().unwrap(); }
        if let Some(b) = env("LR") { cfg.optim.lr = b.parse().unwrap(); }
        if let Some(b) = env("CLIP") { cfg.optim.clip_norm = b.parse().unwrap(); }
        if let Some(b) = env("NTRAIN") { cfg.data.train_count = b.parse().unwrap(); }
        let t = &mut cfg.model.toggles;
        t.sparse_sampling = w != "base";
        t.multiscale = w == "sfms" || w.starts_with("la");
        t.label_aug = w.starts_with("la");
        if let Some(r) = w.strip_prefix("la") { if !r.is_empty() { cfg.augmentation.repeat = r.parse().unwrap(); } }
        let (tr, ev) = datasets(&cfg).unwrap();
        let t0 = Instant::now();
        train(&cfg, &tr, &ev, |r| println!("{} {:?}", r.csv(), t0.elapsed())).unwrap();
    }
}
