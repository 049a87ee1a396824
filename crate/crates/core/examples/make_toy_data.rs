//! Writes a rule-generated toy NLI corpus (train/dev/test JSONL) into a
//! directory, ready for the CLI:
//!
//!   cargo run -p nligen-core --example make_toy_data -- out_dir [seed]

use nligen_core::data::RawExample;
use nligen_core::synth::{toy_corpus, ToyCorpusConfig};

fn write_jsonl(path: &std::path::Path, examples: &[RawExample]) {
    let mut out = String::new();
    for ex in examples {
        let rec = serde_json::json!({
            "gold_label": ex.label.as_str(),
            "sentence1": ex.premise.join(" "),
            "sentence2": ex.hypothesis.join(" "),
        });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).unwrap();
}

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = std::path::PathBuf::from(args.next().unwrap_or_else(|| "toy_data".into()));
    let seed: u64 = args.next().map(|s| s.parse().expect("seed must be an integer")).unwrap_or(7);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = ToyCorpusConfig { n_train: 3000, n_dev: 600, n_test: 600, seed, attribute_values: 3 };
    let (train, dev, test) = toy_corpus(&cfg);
    write_jsonl(&dir.join("train.jsonl"), &train);
    write_jsonl(&dir.join("dev.jsonl"), &dev);
    write_jsonl(&dir.join("test.jsonl"), &test);
    println!(
        "wrote {} train / {} dev / {} test examples to {}",
        train.len(),
        dev.len(),
        test.len(),
        dir.display()
    );
}
