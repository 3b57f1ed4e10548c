#![allow(dead_code)]

pub mod oracle;

use fedlgt::experiment::ExperimentConfig;

/// A seconds-scale experiment: 4 clients, 4 classes, one tiny layer.
pub const TINY: &str = r#"
seed = 7
out_dir = "unused"
eval_every = 1
checkpoint_every = 2

[data.spec]
num_clients = 4
num_classes = 4
feature_dim = 8
size_exponent = 0.5
min_samples = 6
max_samples = 20
cliques = [[0, 1], [2, 3]]
co_occurrence = 0.5
background = 0.1
noise = 0.2
test_samples = 24
seed = 7

[model]
embed_dim = 8
num_feature_tokens = 2
transformer_layers = 1
attention_heads = 2
ffn_dim = 16
backbone = "identity-features"

[federation]
mode = "fedlgt"
rounds = 3
local_epochs = 2
active_fraction = 0.5
sampling = "data-proportional"
batch_size = 4
learning_rate = 1e-2
mask_fraction = [0.25, 1.0]

[calibration]
tau = 0.5
epsilon = 0.02

[embeddings]
source = "synthetic"

[ablation]
seeds = [0, 1]
"#;

pub fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}
