mod common;

use common::{content_image, style_images, tiny_model};
use vshuffle::diffusion::Schedule;
use vshuffle::evalkit::{pca_value_features, run_axis_ablation, run_sweep, shuffle_style_values, SweepCell, CSV_HEADER};
use vshuffle::features::{FeatureCache, Stream};
use vshuffle::losses::ShuffleSpec;
use vshuffle::transfer::{encode, MethodRegistry, TransferConfig, TransferContext};

fn small(method: &str) -> TransferConfig {
    TransferConfig {
        steps: 6,
        inner_steps: 1,
        ..TransferConfig::for_method(method)
    }
}

#[test]
fn failed_cells_are_recorded_and_the_sweep_continues() {
    let ctx = TransferContext::new(tiny_model());
    let c = content_image(8, 1);
    let s = style_images("stripes", 2, 8, 2);
    let cells = vec![
        SweepCell { config: small("vshuffle"), content: c.clone(), styles: s.clone() },
        SweepCell { config: small("ad"), content: c.clone(), styles: s.clone() },
        SweepCell { config: small("ad"), content: c.clone(), styles: s[..1].to_vec() },
    ];
    let out = run_sweep(&ctx, &MethodRegistry::default(), &cells, 2).unwrap();
    assert_eq!(out.rows.len(), 2);
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].cell, 1);
    let csv = out.csv();
    assert!(csv.starts_with(&format!("{CSV_HEADER}\n")));
    assert_eq!(csv.lines().count(), 3);
    assert!(!csv.contains('\r'));
}

#[test]
fn a_single_cell_is_on_the_front() {
    let ctx = TransferContext::new(tiny_model());
    let cells = vec![SweepCell {
        config: small("vshuffle"),
        content: content_image(8, 3),
        styles: style_images("checker", 1, 8, 4),
    }];
    let out = run_sweep(&ctx, &MethodRegistry::default(), &cells, 1).unwrap();
    assert_eq!(out.rows.len(), 1);
    assert!(out.rows[0].pareto);
    assert_eq!(out.rows[0].n, 1);
}

#[test]
fn shuffling_real_value_features_keeps_the_spectrum() {
    let model = tiny_model();
    let sched = Schedule::new(10).unwrap();
    let styles = style_images("stripes", 2, 8, 5);
    let mut cache = FeatureCache::new(2);
    let (t, block) = (5, 14);
    for (i, s) in styles.iter().enumerate() {
        let z = vshuffle::diffusion::ddim_invert(model, &sched, &encode(s), "s").unwrap();
        for tap in model.extract_taps(z.z(t), sched.train_index(t), &[block], t, Stream::Style(i)).unwrap() {
            cache.insert(tap).unwrap();
        }
    }
    let before = pca_value_features(&cache, t, block, 3).unwrap();
    let shuffled = shuffle_style_values(&cache, &ShuffleSpec::default(), 0).unwrap();
    let after = pca_value_features(&shuffled, t, block, 3).unwrap();
    assert_eq!(before.n_images, 2);
    assert_eq!(before.raster.width, 2 * before.side + 1);
    for (a, b) in before.pca.eigenvalues.iter().zip(&after.pca.eigenvalues) {
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-6));
    }
    assert!(after.autocorrelation < before.autocorrelation);
}

#[test]
fn axis_ablation_covers_every_axis() {
    let ctx = TransferContext::new(tiny_model());
    let (c, s) = (content_image(8, 6), style_images("blobs", 1, 8, 7));
    let ab = run_axis_ablation(&ctx, &c, &s[0], &small("vshuffle")).unwrap();
    assert_eq!(ab.runs.len(), 3);
    assert!(ab.runs.iter().all(|(_, r, _)| r.losses.iter().all(|l| l.in_window)));
    assert_eq!(ab.grid.width, 5 * 8 + 4 * 2);
}
