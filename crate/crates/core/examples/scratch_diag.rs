use dedetr::config::RunConfig;
use dedetr::geometry::iou;
use dedetr::train::*;
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args[1].parse().unwrap();
    let which: Vec<&str> = args[2].split(',').collect();
    let env = |k: &str| std::env::var(k).ok();
    for w in which {
        let mut cfg = RunConfig::default();
        cfg.config_id = w.to_string();
        cfg.seed = 1;
        if let Some(b) = env("PG") { cfg.data.spec.part_gain = b.parse().unwrap(); }
        if let Some(b) = env("D") { let d: usize = b.parse().unwrap(); cfg.model.hidden_dim = d; cfg.model.ffn_dim = 4 * d; }
        if let Some(b) = env("SR") { let v: Vec<f64> = b.split(':').map(|x| x.parse().unwrap()).collect(); cfg.data.spec.scale_range = (v[0], v[1]); }
        cfg.optim.epochs = epochs;
        if let Some(b) = env("B") { cfg.optim.batch_size = b.parse().unwrap(); }
        if let Some(b) = env("LR") { cfg.optim.lr = b.parse().unwrap(); }
        if let Some(b) = env("DEC") { cfg.model.dec_layers = b.parse().unwrap(); }
        if let Some(b) = env("K") { cfg.model.roi_resolution = b.parse().unwrap(); }
        let t = &mut cfg.model.toggles;
        t.sparse_sampling = w != "base";
        t.multiscale = w == "sfms" || w.starts_with("la");
        t.label_aug = w.starts_with("la");
        let (tr, ev) = datasets(&cfg).unwrap();
        let out = train(&cfg, &tr, &ev, |r| eprintln!("{}", r.csv())).unwrap();
        // per-size best IoU with any same-class prediction; per layer
        for (tag, set) in [("train", &tr[..50]), ("eval", &ev[..])] {
        let mut buckets = vec![vec![vec![]; 3]; cfg.model.dec_layers];
        for s in set {
            let o = out.model.predict(&s.pyramid).unwrap();
            for g in &s.labels.foreground {
                let sz = (g.bbox.v[2] * g.bbox.v[3]).sqrt() * 256.0;
                let b = if sz < 22.6 { 0 } else if sz < 45.0 { 1 } else { 2 };
                for (l, lo) in o.iter().enumerate() {
                    let best = lo.boxes.iter().map(|p| iou(p, &g.bbox)).fold(0.0, f64::max);
                    buckets[l][b].push(best);
                }
            }
        }
        for (l, bk) in buckets.iter().enumerate() {
            let s: Vec<String> = bk.iter().map(|v| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let r = v.iter().filter(|&&x| x >= 0.5).count() as f64 / v.len() as f64;
                format!("n={} meanIoU={m:.3} R50={r:.3}", v.len())
            }).collect();
            println!("{w} {tag} layer{l}: {}", s.join(" | "));
        }
        }
        println!("{w} final {}", out.rows.last().unwrap().csv());
    }
}
