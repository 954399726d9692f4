use dedetr::config::RunConfig;
use dedetr::train::*;
use std::time::Instant;
fn main() {
    let mut cfg = RunConfig::default();
    let args: Vec<String> = std::env::args().collect();
    cfg.model.hidden_dim = args[1].parse().unwrap();
    cfg.model.ffn_dim = 4 * cfg.model.hidden_dim;
    cfg.model.toggles.sparse_sampling = args[2] == "1";
    cfg.data.train_count = std::env::var("N").map(|v| v.parse().unwrap()).unwrap_or(20);
    cfg.data.eval_count = 1;
    cfg.optim.epochs = 1;
    let (tr, ev) = datasets(&cfg).unwrap();
    let t = Instant::now();
    let o = train(&cfg, &tr, &ev, |r| println!("{}", r.csv())).unwrap();
    println!("{:?} per scene incl eval", t.elapsed() / 20);
    let t = Instant::now();
    evaluate_model(&o.model, &ev, None).unwrap();
    println!("eval {:?} per scene", t.elapsed() / 10);
}
