use empst::pst::Pst;
use empst::model::{Config, Epsilon, Point};
use empst::oracle::OracleSet;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = Config::new(16, Epsilon::new(1, 2).unwrap(), 64 * 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut t = Pst::new(cfg).unwrap();
    let mut oracle = OracleSet::new();
    for step in 0..1500 {
        let roll: f64 = rng.gen();
        if roll < 0.65 || oracle.is_empty() {
            let q = Point::new(rng.gen_range(0..500), rng.gen_range(0..10_000));
            t.insert(q);
            oracle.insert(q);
        } else {
            let q = if rng.gen_bool(0.8) {
                let pts = oracle.points();
                pts[rng.gen_range(0..pts.len())]
            } else {
                Point::new(rng.gen_range(0..500), rng.gen_range(0..10_000))
            };
            t.delete(q);
            oracle.delete(q);
        }
        if let Err(e) = t.check_invariants() {
            println!("step {step}: {e}");
            std::process::exit(1);
        }
    }
    println!("clean");
}
