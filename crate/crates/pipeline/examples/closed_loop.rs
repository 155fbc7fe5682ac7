//! Runs the closed loop once per seed and prints the key numbers.
//!
//! cargo run -p hfalign-pipeline --example closed_loop -- 1 2 3
//!
//! `HFALIGN_PATCH` may hold a JSON object merged over the default config,
//! e.g. `{"align": {"epochs": 10}}`.

use hfalign_core::ExperimentConfig;
use hfalign_pipeline::experiment::{closed_loop, Variant};

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn main() {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_env_filter("warn").init();
    let mut cfg = ExperimentConfig::default();
    if let Ok(patch) = std::env::var("HFALIGN_PATCH") {
        let mut v = serde_json::to_value(&cfg).unwrap();
        merge(&mut v, serde_json::from_str(&patch).expect("patch is JSON"));
        cfg = ExperimentConfig::from_json(&v.to_string()).expect("patched config is valid");
    }
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    for seed in if seeds.is_empty() { vec![1] } else { seeds } {
        match closed_loop(&cfg, seed, Variant::from_config(&cfg)) {
            Ok(r) => {
                let acc = r.critic_accuracy.as_ref().map(|a| a.per_dimension.iter().map(|d| format!("{:.3}", d.accuracy)).collect::<Vec<_>>());
                println!(
                    "seed {seed}: critic {:.3} {:?} reward {:.4} -> {:.4} ({:+.1}%) in {:.1}s",
                    r.critic_holdout_accuracy,
                    acc,
                    r.uplift.reward_before,
                    r.uplift.reward_after,
                    100.0 * r.uplift.relative_uplift,
                    r.wall_time_s,
                );
                if let Some(a) = &r.critic_accuracy {
                    for d in &a.per_dimension {
                        println!("  confusion {:<22} {:?}", d.dimension.as_str(), d.confusion.counts);
                    }
                }
                for d in &r.uplift.per_dimension {
                    println!(
                        "  {:<22} {:.3} -> {:.3}  {:?} -> {:?}",
                        d.dimension.as_str(),
                        d.metric_before,
                        d.metric_after,
                        (d.labels_before.good, d.labels_before.normal, d.labels_before.bad),
                        (d.labels_after.good, d.labels_after.normal, d.labels_after.bad)
                    );
                }
            }
            Err(e) => println!("seed {seed}: error {e}"),
        }
    }
}
