use coconut::cli::{cmd_gen, cmd_train, Analysis, RunConfig};
use coconut::curriculum::Variant;
use coconut::prosqa::{SplitSizes, Split};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = RunConfig> {
    (
        any::<u64>(),
        0usize..7,
        1usize..4,
        prop::collection::vec(1usize..9, 0..8),
        (1e-6f64..1e-2, 1usize..256),
        prop::option::of(1usize..1000),
        (0usize..3, 0usize..3, any::<bool>()),
        "[a-z]{1,8}(/[a-z0-9]{1,8}){0,2}",
    )
        .prop_map(|(seed, v, c, epochs, (lr, batch), limit, (split, analysis, normalize), dir)| {
            let mut cfg = RunConfig { seed, output_dir: dir.into(), ..RunConfig::default() };
            cfg.schedule.variant = Variant::ALL[v];
            cfg.schedule.thoughts_per_step = c;
            cfg.schedule.stages = epochs.len();
            cfg.schedule.epochs_per_stage = epochs;
            cfg.schedule.lr = lr;
            cfg.schedule.batch_size = batch;
            cfg.data.train_limit = limit;
            cfg.eval.split = Split::ALL[split];
            cfg.eval.ks = (0..c + 2).collect();
            cfg.probe.analysis = [Analysis::Parallelism, Analysis::Height, Analysis::Decode][analysis];
            cfg.probe.options.normalize = normalize;
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn configs_survive_toml(cfg in config()) {
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }
}

#[test]
fn run_directory_describes_itself() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig { seed: 3, output_dir: root.path().join("run"), ..RunConfig::default() };
    cfg.data.dir = root.path().join("data");
    cfg.data.sizes = SplitSizes { train: 6, val: 2, test: 2 };
    cfg.model.layers = 1;
    cfg.model.d_model = 16;
    cfg.model.heads = 2;
    cfg.model.d_ff = 32;
    cfg.schedule.max_epochs = 2;
    cfg.schedule.batch_size = 3;
    cmd_gen(&cfg).unwrap();
    cmd_train(&cfg, None).unwrap();

    let snapshot = RunConfig::load(&cfg.output_dir.join("config.toml")).unwrap();
    assert_eq!(snapshot.seed, 3);
    assert_eq!(snapshot.model.seed, 3);
    assert_eq!(snapshot.schedule.seed, 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.output_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["crate_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["schedule"]["max_epochs"], 2);
    assert_eq!(manifest["records"].as_array().unwrap().len(), 2);
    for f in ["schedule.toml", "metrics.csv", "loss_trace.csv"] {
        assert!(cfg.output_dir.join(f).is_file(), "{f} missing");
    }
    assert!(cfg.data.dir.join("config.toml").is_file());
}
