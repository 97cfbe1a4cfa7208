//! End-to-end sampler runs against the uncached oracle.

use clusca_core::cache::{CacheConfig, PolicyKind, StepTag};
use clusca_core::metrics::{count_flops, relative_error};
use clusca_core::model::{ModelConfig, ToyDit};
use clusca_core::report::RunReport;
use clusca_core::sampler::{sample, SamplerConfig, Seeds, TrajectorySpec};
use clusca_core::{no_clock, Error, FeatureMap};

fn small_model() -> ToyDit {
    ToyDit::new(ModelConfig {
        depth: 4,
        height: 8,
        width: 8,
        dim: 32,
        heads: 4,
        num_classes: 10,
        weight_seed: 7,
    })
    .unwrap()
}

fn sampler(steps: usize) -> SamplerConfig {
    SamplerConfig {
        steps,
        ..SamplerConfig::default()
    }
}

const SEEDS: Seeds = Seeds {
    noise: 11,
    cluster: 12,
    selection: 13,
};

fn cache(policy: PolicyKind) -> CacheConfig {
    CacheConfig {
        policy,
        clusters: 8,
        ..CacheConfig::default()
    }
}

fn run(model: &ToyDit, c: &CacheConfig, steps: usize, record: &TrajectorySpec) -> RunReport {
    sample(model, c, &sampler(steps), SEEDS, record, no_clock).unwrap()
}

fn every_latent() -> TrajectorySpec {
    TrajectorySpec {
        stride: 1,
        latent: true,
        ..TrajectorySpec::default()
    }
}

fn latents(r: &RunReport) -> Vec<&FeatureMap> {
    r.trajectory.iter().map(|s| s.latent.as_ref().unwrap()).collect()
}

fn max_abs_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn interval_one_is_the_oracle_for_every_policy() {
    let model = small_model();
    let oracle = run(&model, &cache(PolicyKind::Full), 12, &TrajectorySpec::default());
    for policy in PolicyKind::ALL {
        let c = CacheConfig {
            interval: 1,
            ..cache(policy)
        };
        let r = run(&model, &c, 12, &TrajectorySpec::default());
        assert_eq!(r.final_latent, oracle.final_latent, "{policy}");
        assert_eq!(r.speedup_model, 1.0, "{policy}");
    }
}

#[test]
fn clusters_equal_to_tokens_recompute_everything() {
    let model = small_model();
    let oracle = run(&model, &cache(PolicyKind::Full), 12, &TrajectorySpec::default());
    let c = CacheConfig {
        clusters: 64,
        ..cache(PolicyKind::ClusCa)
    };
    let r = run(&model, &c, 12, &TrajectorySpec::default());
    assert!(r.steps.iter().all(|s| s.compute_tokens == 64));
    assert!(relative_error(&r.final_latent, &oracle.final_latent).unwrap() <= 1e-9);
}

#[test]
fn toca_with_all_tokens_is_the_oracle() {
    let model = small_model();
    let oracle = run(&model, &cache(PolicyKind::Full), 10, &TrajectorySpec::default());
    let c = CacheConfig {
        clusters: 64,
        ..cache(PolicyKind::Toca)
    };
    let r = run(&model, &c, 10, &TrajectorySpec::default());
    assert!(relative_error(&r.final_latent, &oracle.final_latent).unwrap() <= 1e-9);
}

#[test]
fn reduction_lattice_holds_per_step() {
    let model = small_model();
    let rec = every_latent();
    for order in 0..=2 {
        let taylor = run(&model, &CacheConfig { order, ..cache(PolicyKind::TaylorSeer) }, 10, &rec);
        let empty = CacheConfig {
            order,
            gamma: 0.0,
            representatives: false,
            ..cache(PolicyKind::ClusCa)
        };
        let clusca = run(&model, &empty, 10, &rec);
        for (a, b) in latents(&clusca).into_iter().zip(latents(&taylor)) {
            assert!(max_abs_diff(a, b) <= 1e-12, "order {order}");
        }
    }
    let fora = run(&model, &cache(PolicyKind::Fora), 10, &rec);
    let t0 = run(&model, &CacheConfig { order: 0, ..cache(PolicyKind::TaylorSeer) }, 10, &rec);
    assert_eq!(latents(&fora).len(), 10);
    for (a, b) in latents(&fora).into_iter().zip(latents(&t0)) {
        assert!(max_abs_diff(a, b) <= 1e-12);
    }
}

#[test]
fn reruns_are_bit_identical() {
    let model = small_model();
    let rec = TrajectorySpec {
        stride: 2,
        latent: true,
        features: Some(clusca_core::model::Site::new(3, clusca_core::model::Module::Mlp)),
        analysis_clustering: true,
        ari_offsets: vec![2, 4],
    };
    for policy in PolicyKind::ALL {
        let a = run(&model, &cache(policy), 10, &rec);
        let b = run(&model, &cache(policy), 10, &rec);
        assert_eq!(a, b, "{policy}");
    }
}

#[test]
fn flops_tally_is_conserved_and_matches_the_analytic_count() {
    let model = small_model();
    for policy in PolicyKind::ALL {
        let c = cache(policy);
        let r = run(&model, &c, 20, &TrajectorySpec::default());
        let mut model_sum = 0;
        let mut total_sum = 0;
        for s in &r.steps {
            model_sum += s.flops.model;
            total_sum += s.flops.total();
        }
        assert_eq!(model_sum, r.flops.model);
        assert_eq!(total_sum, r.flops.total());
        let analytic = count_flops(model.config(), 20, &c);
        assert_eq!(analytic.policy.model, r.flops.model, "{policy}");
        assert_eq!(analytic.policy.propagation, r.flops.propagation, "{policy}");
        assert!(r.flops.clustering <= analytic.policy.clustering, "{policy}");
        assert_eq!(r.full_flops, analytic.full);
    }
}

#[test]
fn clusca_cost_lies_between_taylorseer_and_full() {
    let model = small_model();
    let full = run(&model, &cache(PolicyKind::Full), 20, &TrajectorySpec::default());
    let taylor = run(&model, &cache(PolicyKind::TaylorSeer), 20, &TrajectorySpec::default());
    let clusca = run(&model, &cache(PolicyKind::ClusCa), 20, &TrajectorySpec::default());
    assert!(taylor.flops.total() < clusca.flops.total());
    assert!(clusca.flops.total() < full.flops.total());
}

#[test]
fn schedule_tags_follow_the_interval() {
    let model = small_model();
    let r = run(&model, &cache(PolicyKind::ClusCa), 20, &TrajectorySpec::default());
    for s in &r.steps {
        assert_eq!(s.tag == StepTag::Full, s.step % 5 == 0);
        assert_eq!(s.offset, s.step % 5);
    }
    assert_eq!(r.full_steps(), 4);
    assert_eq!(r.assignments.len(), 4);
    assert_eq!(r.ari_series.len(), 3);
}

#[test]
fn rearranged_plan_ends_with_a_full_step() {
    let model = small_model();
    let c = CacheConfig {
        rearrange_last: true,
        ..cache(PolicyKind::ClusCa)
    };
    let r = run(&model, &c, 20, &TrajectorySpec::default());
    assert_eq!(r.full_steps(), 4);
    assert_eq!(r.steps.last().unwrap().tag, StepTag::Full);
}

#[test]
fn norm_tripwire_reports_divergence() {
    let model = small_model();
    let s = SamplerConfig {
        max_norm_growth: 1.0,
        ..sampler(5)
    };
    let err = sample(&model, &cache(PolicyKind::Full), &s, SEEDS, &TrajectorySpec::default(), no_clock).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
}

#[test]
fn too_many_clusters_is_a_config_error() {
    let model = small_model();
    let c = CacheConfig {
        clusters: 65,
        ..cache(PolicyKind::ClusCa)
    };
    let err = sample(&model, &c, &sampler(5), SEEDS, &TrajectorySpec::default(), no_clock).unwrap_err();
    assert!(matches!(err, Error::Config { field: "cache.clusters", .. }), "{err}");
}
