use histoselect::objective::BetaSchedule;
use histoselect::oracle::{finite_diff, gradcheck, relative_error, GradCheckConfig};
use histoselect::training::{
    forward_backward, init_params, ste_anchor, ste_probe_total, Cap, PreparedSlide, TrainConfig,
};
use histoselect::wsi_data::{generate_synthetic, SyntheticSpec};

fn small(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        grid_rows: 4,
        grid_cols: 8,
        m_tissues: 3,
        dim: 8,
        n_classes: 4,
        noise_sigma: 0.3,
        blob_count: 2,
        class_signal_scale: 1.0,
        seed,
    }
}

#[test]
fn everything_selected_without_compression_needs_no_boundary_exclusion() {
    for seed in 0..5 {
        let slide = generate_synthetic(&small(seed)).unwrap();
        let prepared = PreparedSlide::new(&slide.bundle, &slide.prompts, &slide.question).unwrap();
        let mut params = init_params(8, 4, 4, seed);
        // saturated group rates give k_j = N_j, so every patch is selected
        params.group_net.b2 = 40.0;
        let cfg = TrainConfig {
            hidden: 4,
            cap: Some(Cap::Absolute(32)),
            schedule: BetaSchedule::disabled(),
            ..TrainConfig::new(8, 4)
        };
        let (result, _, analytic) = forward_backward(&prepared, &params, &cfg, 0).unwrap();
        assert_eq!(result.selected.len(), 32);
        let anchor = ste_anchor(&prepared, &params, &cfg, 0).unwrap();
        let numeric = finite_diff(
            |p| ste_probe_total(&prepared, p, &cfg, 0, &anchor).unwrap().expect("selection is fixed"),
            &params,
            1e-5,
        );
        for (a, n) in analytic.blocks().iter().zip(numeric.blocks()) {
            for (&x, &y) in a.iter().zip(n.iter()) {
                assert!(relative_error(x, y) <= 1e-4, "seed {seed}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn gradcheck_with_global_cap_and_swapped_schedule() {
    for seed in 0..5 {
        let report = gradcheck(&GradCheckConfig {
            seed,
            cap: Some(Cap::Fraction(0.3)),
            schedule: BetaSchedule::swapped_targets(),
            iter: 1234,
            ..GradCheckConfig::default()
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.blocks.iter().all(|b| b.max_rel_error.is_finite() && b.max_rel_error >= 0.0));
    }
}

#[test]
fn gradcheck_report_serializes() {
    let report = gradcheck(&GradCheckConfig::default()).unwrap();
    let json = serde_json::to_string(&report).unwrap();
    for key in ["instance_seed", "boundary_resamples", "blocks", "worst", "max_rel_error"] {
        assert!(json.contains(key), "{key} missing from {json}");
    }
}
