//! Built-in benchmark worlds. All of them are small enough that every
//! score, likelihood, and transport quantity stays exactly computable.

use crate::distill::Renderer;
use crate::mixture::CorruptionOp;
use crate::schedule::NoiseSchedule;
use crate::world::{ClassConfig, World, WorldConfig};
use crate::{Matrix, Result};

/// Per-class corruption suite shared by the 1D world: widened, noisy,
/// both, and shifted variants.
fn corruption_suite(base: &str) -> Vec<ClassConfig> {
    vec![
        ClassConfig::corruption(
            &format!("{base}:smooth"),
            base,
            vec![CorruptionOp::Smooth { c: 0.5 }],
        ),
        ClassConfig::corruption(
            &format!("{base}:noisy"),
            base,
            vec![CorruptionOp::Noisy { c: 0.3 }],
        ),
        ClassConfig::corruption(
            &format!("{base}:smooth+noisy"),
            base,
            vec![CorruptionOp::Smooth { c: 0.5 }, CorruptionOp::Noisy { c: 0.3 }],
        ),
        ClassConfig::corruption(
            &format!("{base}:shift"),
            base,
            vec![CorruptionOp::Shift { v: vec![1.0] }],
        ),
    ]
}

/// Two well-separated 1D classes at +-2 with variance 0.25, each with a
/// full corruption suite.
pub fn b1() -> World {
    let mut classes = vec![
        ClassConfig::content("A", vec![1.0], vec![vec![-2.0]], vec![vec![vec![0.25]]]),
        ClassConfig::content("B", vec![1.0], vec![vec![2.0]], vec![vec![vec![0.25]]]),
    ];
    classes.extend(corruption_suite("A"));
    classes.extend(corruption_suite("B"));
    WorldConfig { schedule: NoiseSchedule::default(), classes, uncond: None }
        .build()
        .expect("builtin 1D world is valid")
}

/// Eight modes on a radius-3 ring in 2D, grouped into four two-mode arc
/// classes, each with mean-based and noise corruptions.
pub fn b2() -> World {
    let radius = 3.0;
    let var = 0.3;
    let mut classes = Vec::new();
    let mut suites = Vec::new();
    for k in 0..4usize {
        let label = format!("C{k}");
        let mut means = Vec::new();
        for j in 0..2usize {
            let angle = (2 * k + j) as f64 * std::f64::consts::FRAC_PI_4;
            means.push(vec![radius * angle.cos(), radius * angle.sin()]);
        }
        let cov = vec![vec![var, 0.0], vec![0.0, var]];
        classes.push(ClassConfig::content(
            &label,
            vec![0.5, 0.5],
            means.clone(),
            vec![cov.clone(), cov],
        ));
        suites.push(ClassConfig::corruption(
            &format!("{label}:desat"),
            &label,
            vec![CorruptionOp::Desaturate { lambda: 0.5 }],
        ));
        suites.push(ClassConfig::corruption(
            &format!("{label}:oversat"),
            &label,
            vec![CorruptionOp::Oversaturate { lambda: 1.5 }],
        ));
        suites.push(ClassConfig::corruption(
            &format!("{label}:noisy"),
            &label,
            vec![CorruptionOp::Noisy { c: 0.3 }],
        ));
        // what a high-guidance warm-up stage leaves behind: flattened
        // slightly undersaturated blobs plus oversaturated excursions,
        // mass-balanced so the artifact class is centered on the clean one
        let flat_cov = vec![vec![0.1 * var, 0.0], vec![0.0, 0.1 * var]];
        let full_cov = vec![vec![var, 0.0], vec![0.0, var]];
        let (flat_r, over_r) = (0.8, 1.5);
        let flat_w = (over_r - 1.0) / (over_r - flat_r) / 2.0;
        let over_w = 0.5 - flat_w;
        let mut art_means: Vec<Vec<f64>> =
            means.iter().map(|m| vec![flat_r * m[0], flat_r * m[1]]).collect();
        art_means.extend(means.iter().map(|m| vec![over_r * m[0], over_r * m[1]]));
        suites.push(ClassConfig::corruption_mixture(
            &format!("{label}:flat+oversat"),
            &label,
            vec![flat_w, flat_w, over_w, over_w],
            art_means,
            vec![flat_cov.clone(), flat_cov, full_cov.clone(), full_cov],
        ));
    }
    classes.extend(suites);
    WorldConfig { schedule: NoiseSchedule::default(), classes, uncond: None }
        .build()
        .expect("builtin ring world is valid")
}

/// Four shared parameters observed through three 2D linear views: two
/// orthogonal coordinate pairs and one mixing view.
pub fn b3() -> (World, Renderer) {
    let world = WorldConfig {
        schedule: NoiseSchedule::default(),
        classes: vec![
            ClassConfig::content(
                "src",
                vec![1.0],
                vec![vec![0.0, 0.0]],
                vec![vec![vec![0.8, 0.0], vec![0.0, 0.8]]],
            ),
            ClassConfig::content(
                "tgt",
                vec![0.5, 0.5],
                vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
                vec![
                    vec![vec![0.3, 0.0], vec![0.0, 0.3]],
                    vec![vec![0.3, 0.0], vec![0.0, 0.3]],
                ],
            ),
        ],
        uncond: None,
    }
    .build()
    .expect("builtin multiview world is valid");
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let views = vec![
        Matrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
        Matrix::from_row_slice(2, 4, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        Matrix::from_row_slice(2, 4, &[s, 0.0, s, 0.0, 0.0, s, 0.0, s]),
    ];
    let renderer = Renderer::linear_views(views).expect("builtin views are valid");
    (world, renderer)
}

/// Resolve a world argument: a builtin name (`b1`, `b2`, `b3`) or a path to
/// a world JSON file (paired with an identity renderer).
pub fn load(spec: &str) -> Result<(World, Renderer)> {
    match spec {
        "b1" => {
            let w = b1();
            let r = Renderer::identity(w.dim())?;
            Ok((w, r))
        }
        "b2" => {
            let w = b2();
            let r = Renderer::identity(w.dim())?;
            Ok((w, r))
        }
        "b3" => Ok(b3()),
        path => {
            let w = World::from_json_file(path)?;
            let r = Renderer::identity(w.dim())?;
            Ok((w, r))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn the_1d_world_has_the_full_corruption_suite() {
        let w = b1();
        assert_eq!(w.dim(), 1);
        assert_eq!(w.n_classes(), 10);
        assert_eq!(w.content_labels(), vec!["A", "B"]);
        let chained = w.class("B:smooth+noisy").unwrap();
        assert_abs_diff_eq!(chained.mixture.covs()[0][(0, 0)], 1.05, epsilon = 1e-15);
        assert_eq!(w.uncond().weights()[0], 0.5);
    }

    #[test]
    fn the_ring_world_places_modes_on_the_circle() {
        let w = b2();
        assert_eq!(w.dim(), 2);
        assert_eq!(w.n_classes(), 20);
        for label in ["C0", "C1", "C2", "C3"] {
            for mean in w.class(label).unwrap().mixture.means() {
                assert_abs_diff_eq!(mean.norm(), 3.0, epsilon = 1e-12);
            }
        }
        // desaturation contracts toward the class's own center
        let desat = w.class("C0:desat").unwrap();
        let base = w.class("C0").unwrap();
        assert!(desat.mixture.means()[0].norm() < base.mixture.means()[0].norm());
        // the warm-up artifact class is mass-balanced around the clean one
        let art = w.class("C0:flat+oversat").unwrap();
        assert_eq!(art.mixture.n_components(), 4);
        assert_abs_diff_eq!(art.mixture.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let centroid = |m: &crate::mixture::GaussianMixture| {
            m.means()
                .iter()
                .zip(m.weights())
                .fold(crate::Vector::zeros(2), |acc, (mu, w)| acc + mu * *w)
        };
        assert_abs_diff_eq!(
            (centroid(&art.mixture) - centroid(&base.mixture)).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn the_multiview_pair_is_consistent() {
        let (w, r) = b3();
        assert_eq!(w.dim(), 2);
        assert_eq!(r.param_dim(), 4);
        assert_eq!(r.out_dim(), 2);
        assert_eq!(r.n_views(), 3);
    }

    #[test]
    fn load_resolves_builtins_and_rejects_junk_paths() {
        assert!(load("b1").is_ok());
        assert!(load("b3").is_ok());
        assert!(load("/no/such/world.json").is_err());
    }
}
