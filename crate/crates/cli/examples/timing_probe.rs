use std::time::Instant;
use seqlab_cli::config::RunConfig;
use seqlab_cli::train::run_training;

const CFG: &str = r#"
seed = 42
[model]
family = "rnmt_plus"
vocab_size = 16
label_smoothing = 0.1
[model.encoder]
kind = "rnmt"
layers = 2
units = 32
embed_dim = 32
[model.decoder]
kind = "rnmt"
layers = 3
units = 32
embed_dim = 32
attention_heads = 4
[schedule]
kind = "rnmt"
base = 1e-3
warmup = 100
decay_start = 40000
decay_end = 80000
[training]
max_steps = 60
replicas = 1
eval_every = 30
window = 21
batch = { mode = "sentences", size = 32 }
eval_beam = 1
max_decode_len = 20
dev_bleu_subset = 50
[data]
task = "toy_translation"
vocab_size = 16
min_len = 4
max_len = 12
train_pairs = 1000
dev_pairs = 100
"#;

fn main() {
    let dir = std::env::temp_dir().join("seqlab-timing");
    std::env::set_var("SEQLAB_LOG_DIR", &dir);
    let cfg: RunConfig = toml::from_str(CFG).unwrap();
    let t0 = Instant::now();
    let report = run_training(&cfg).unwrap();
    let dt = t0.elapsed();
    println!(
        "60 steps + 2 evals in {:.2}s ({:.0} ms/step incl eval), acc {:.3}, bleu {:.1}",
        dt.as_secs_f64(),
        dt.as_secs_f64() * 1000.0 / 60.0,
        report.final_token_accuracy,
        report.final_bleu
    );
}
