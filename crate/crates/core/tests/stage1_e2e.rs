//! End-to-end checks of the stage-1 trainer on synthetic data: the
//! pseudo-labels must recover the generating classes and agree across
//! views, and the assignment head must not collapse.

use mvd::consistency::{assign_pseudolabels, stage1_train, Stage1Config};
use mvd::datasets::{gen_synthetic, SyntheticSpec};
use mvd::evaluate::hungarian_acc;

#[test]
fn stage1_recovers_classes_on_synthetic_data() {
    let spec = SyntheticSpec::default(); // 4 classes, 2 views, n=2000
    let data = gen_synthetic::<f64>(&spec).unwrap();
    let cfg = Stage1Config::default();
    let out = stage1_train(&data, &cfg).unwrap();

    // Contrastive phase must end below the uniform-similarity baseline.
    let m = (2 * cfg.batch_size * 2) as f64;
    let last_pre = out
        .curves
        .iter()
        .filter(|r| r.phase == "pretrain")
        .last()
        .unwrap();
    assert!(
        last_pre.l_ins.unwrap() < (m - 1.0).ln(),
        "pretrain loss {} vs uniform {}",
        last_pre.l_ins.unwrap(),
        (m - 1.0).ln()
    );

    // No cluster collapse: batch-mean assignment entropy stays high.
    let last_clu = out
        .curves
        .iter()
        .filter(|r| r.phase == "cluster")
        .last()
        .unwrap();
    let ent = last_clu.entropy.unwrap();
    assert!(
        ent >= 0.8 * (cfg.clusters as f64).ln(),
        "entropy {ent} below 0.8 ln C"
    );

    let labels = data.labels.as_ref().unwrap();
    let pl = assign_pseudolabels(&out.state, &data).unwrap();

    // Pseudo-labels recover the generating classes.
    let acc = hungarian_acc(&pl.consensus.hard, labels).unwrap();
    assert!(acc >= 0.9, "pseudo-label accuracy {acc}");

    // Views agree on the hard label for nearly all instances.
    let agree = pl.per_view[0]
        .hard
        .iter()
        .zip(&pl.per_view[1].hard)
        .filter(|(a, b)| a == b)
        .count() as f64
        / data.len() as f64;
    assert!(agree >= 0.95, "cross-view agreement {agree}");

    eprintln!("stage1 e2e: acc={acc:.4} agree={agree:.4} entropy={ent:.4}");
}
