use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Mesh;
use crate::error::{Error, Result};

/// Synthetic scan of a mesh: vertices jittered by isotropic Gaussian noise,
/// a fraction dropped, the rest in seed-determined order.
pub fn emit_point_cloud(m: &Mesh, noise_sigma: f64, dropout_fraction: f64, seed: u64) -> Result<Vec<[f64; 3]>> {
    if !(noise_sigma >= 0.0) || !(0.0..1.0).contains(&dropout_fraction) {
        return Err(Error::Param(format!(
            "noise sigma {noise_sigma} must be >= 0 and dropout {dropout_fraction} in [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..m.vertices.len()).collect();
    order.shuffle(&mut rng);
    let keep = ((1.0 - dropout_fraction) * m.vertices.len() as f64).round() as usize;
    order.truncate(keep);
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Param(e.to_string()))?;
    Ok(order
        .into_iter()
        .map(|i| {
            let p = m.vertices[i];
            if noise_sigma == 0.0 {
                p
            } else {
                [p[0] + normal.sample(&mut rng), p[1] + normal.sample(&mut rng), p[2] + normal.sample(&mut rng)]
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_mesh, DeformationState, SensorGeometry};

    fn mesh() -> Mesh {
        make_mesh(&SensorGeometry::default(), &DeformationState::bent(1.0), 1000).unwrap()
    }

    #[test]
    fn zero_noise_is_a_permutation() {
        let m = mesh();
        let cloud = emit_point_cloud(&m, 0.0, 0.0, 3).unwrap();
        assert_eq!(cloud.len(), m.vertices.len());
        let key = |p: &[f64; 3]| p.map(f64::to_bits);
        let mut a: Vec<_> = cloud.iter().map(key).collect();
        let mut b: Vec<_> = m.vertices.iter().map(key).collect();
        assert_ne!(a, b, "order should be shuffled");
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_count_and_determinism() {
        let m = mesh();
        let a = emit_point_cloud(&m, 0.1, 0.05, 7).unwrap();
        assert_eq!(a.len(), (0.95 * m.vertices.len() as f64).round() as usize);
        let b = emit_point_cloud(&m, 0.1, 0.05, 7).unwrap();
        assert_eq!(a, b);
        let c = emit_point_cloud(&m, 0.1, 0.05, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_parameters() {
        let m = mesh();
        assert!(emit_point_cloud(&m, -1.0, 0.0, 0).is_err());
        assert!(emit_point_cloud(&m, 0.0, 1.0, 0).is_err());
    }
}
