//! Query ground truth stays out of every adaptation and prediction path.

use sparseg::bench::{adapt, fold_task, load_experiment_data, predict_query, prepare, target_folds, ExperimentConfig, Method, Preset};
use sparseg::data::{Grid, FOREGROUND};
use sparseg::sparsify::AnnotationStyle;

const CONFIG: &str = r#"
name = "isolation"
method = "weasel"
shots = [2]
annotations = [{ style = "points", n = 4 }]
source_task = "disks"

[network]
widths = [2, 4, 8]

[meta]
epochs = 2
task_batch = 2
inner_batch = 2
query_batch = 2

[tune]
epochs = 2
pretrain_epochs = 2

[data]
kind = "synthetic"
[data.synth]
size = 16
images_per_family = 10
sources = [
  { name = "disks", kind = "disk", background = 0.25, foreground = 0.75, noise = 0.08, texture = 0.05 },
  { name = "rings", kind = "ring", background = 0.2, foreground = 0.8, noise = 0.06, texture = 0.04 },
]
held_out = { name = "triangles", kind = "triangle", background = 0.25, foreground = 0.75, noise = 0.08, texture = 0.05 }
"#;

#[test]
fn adaptation_never_reads_or_depends_on_query_labels() {
    for method in [Method::Weasel, Method::Protoseg, Method::Finetune, Method::Scratch] {
        let mut config = ExperimentConfig::parse(CONFIG, Some(Preset::Synthetic)).unwrap();
        config.method = method;
        let data = load_experiment_data(&config).unwrap();
        let prepared = prepare(&config, &data, &mut |_, _| Ok(())).unwrap();
        let folds = target_folds(&config, &data).unwrap();
        let style = AnnotationStyle::Points { n: 4 };

        let clean = fold_task(&config, &data, &folds[0], 0, 2, &style).unwrap();
        let net = adapt(&config, &data, &prepared, &clean, 0).unwrap();
        let pred = predict_query(&config, &net, &clean).unwrap();
        assert_eq!(clean.query.ground_truth_reads(), 0, "{method:?}");

        let mut poisoned = clean.clone();
        let poison: Vec<Grid<u8>> = clean
            .query
            .images()
            .iter()
            .map(|im| Grid::filled(im.height(), im.width(), FOREGROUND))
            .collect();
        poisoned.query.replace_ground_truth(poison);
        let net = adapt(&config, &data, &prepared, &poisoned, 0).unwrap();
        assert_eq!(predict_query(&config, &net, &poisoned).unwrap(), pred, "{method:?}");
        assert_eq!(poisoned.query.ground_truth_reads(), 0, "{method:?}");
    }
}
