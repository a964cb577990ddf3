//! Robust rigid registration: RANSAC over putative correspondences, then
//! point-to-point ICP refinement.
//!
//! cargo run --release --example ransac_registration

use mprf::geometry::{rot_z_deg, PoseSE3};
use mprf::pose::{icp_refine, kabsch, pose_errors, ransac_register, RansacConfig};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = PoseSE3::new(rot_z_deg(17.0), Vector3::new(1.2, -0.4, 0.1))?;
    let noise = Normal::new(0.0, 0.005)?;

    let src: Vec<Vector3<f64>> = (0..200)
        .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..3.0)))
        .collect();
    let mut pairs: Vec<(Vector3<f64>, Vector3<f64>)> = src
        .iter()
        .map(|p| {
            let q = gt.transform_point(p) + Vector3::from_fn(|_, _| noise.sample(&mut rng));
            (*p, q)
        })
        .collect();
    // 40% of correspondences point somewhere random.
    for pair in pairs.iter_mut().take(80) {
        pair.1 = Vector3::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(0.0..3.0));
    }

    let (s, d): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
    let naive = kabsch(&s, &d)?;
    let e = pose_errors(&naive, &gt);
    println!("plain Kabsch on all pairs: yaw {:.3}°, dx {:.3} m, dy {:.3} m", e.yaw_deg, e.dx_m, e.dy_m);

    let res = ransac_register(&pairs, &RansacConfig::default())?;
    let e = pose_errors(&res.transform, &gt);
    println!(
        "RANSAC: {} inliers after {} iterations, rmse {:.4} m; yaw {:.4}°, dx {:.4} m, dy {:.4} m",
        res.inlier_count(),
        res.iterations_run,
        res.inlier_rmse,
        e.yaw_deg,
        e.dx_m,
        e.dy_m
    );

    let dst: Vec<Vector3<f64>> = src.iter().map(|p| gt.transform_point(p)).collect();
    let icp = icp_refine(&src, &dst, &res.transform, 0.1, 30)?;
    let e = pose_errors(&icp.transform, &gt);
    println!(
        "ICP: {} iterations, converged {}, rmse {:.2e} -> {:.2e}; yaw {:.2e}°",
        icp.iterations,
        icp.converged,
        icp.rmse_history.first().copied().unwrap_or(f64::NAN),
        icp.rmse_history.last().copied().unwrap_or(f64::NAN),
        e.yaw_deg
    );
    Ok(())
}
