use manifold_prune::config::RunConfig;
use manifold_prune::datagen::{generate_split, DatasetConfig, Split};
use manifold_prune::models::pretrain_gan;

#[test]
fn single_sample_is_memorised() {
    let mut cfg = RunConfig::default();
    cfg.data = DatasetConfig { train: 1, val: 0, test: 0, ..Default::default() };
    cfg.pretrain.steps = 200;
    let ds = generate_split(&cfg.data, Split::Train, 3).unwrap();
    let (_, _, hist) = pretrain_gan(&ds, &ds, &cfg).unwrap();
    assert_eq!(hist.rows.len(), 200);
    assert!(hist.val_l1 < 0.05, "val L1 {}", hist.val_l1);
}
