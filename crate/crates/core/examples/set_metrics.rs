// Compares two image sets with pixel fidelity, assignment cost and a feature-space distance.

use restore_rl::bench::{generate_split, DatasetConfig, ProceduralScenes, Split};
use restore_rl::metrics::{empirical_ot_cost, frechet_proxy, psnr, solve_assignment, ssim, GroundCost, SsimWindow};
use restore_rl::Grid;

pub fn run_example() -> restore_rl::Result<()> {
    let cfg = DatasetConfig {
        n: 40,
        height: 16,
        width: 16,
        ..DatasetConfig::default()
    };
    let pairs = generate_split(&cfg, &ProceduralScenes, Split::Train)?;
    let gts: Vec<Grid> = pairs.iter().map(|p| p.gt.clone()).collect();
    let degraded: Vec<Grid> = pairs.iter().map(|p| p.degraded.clone()).collect();

    let window = SsimWindow::default();
    let (mut p, mut s) = (0.0, 0.0);
    for pair in &pairs {
        p += psnr(&pair.degraded, &pair.gt, 1.0)?;
        s += ssim(&pair.degraded, &pair.gt, &window)?;
    }
    let n = pairs.len() as f64;
    println!("degraded vs clean: PSNR {:.2} dB, SSIM {:.3}", p / n, s / n);

    println!("OT cost  degraded->clean {:.4}", empirical_ot_cost(&degraded, &gts, GroundCost::L2)?);
    println!("OT cost  clean->clean    {:.4}", empirical_ot_cost(&gts, &gts, GroundCost::L2)?);
    println!("Frechet  degraded->clean {:.4}", frechet_proxy(&degraded, &gts)?);

    let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
    let (total, rows) = solve_assignment(&cost)?;
    println!("toy assignment {rows:?} costs {total}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> restore_rl::Result<()> {
    run_example()
}
