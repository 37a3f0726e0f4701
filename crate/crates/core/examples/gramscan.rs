// Scratch: acceptance-scale feasibility for oracle equivalence and
// training quality.
use ndarray::{Array2, Array3};
use p2s_core::basis::{fit_pca, project_psf, reconstruct_psf};
use p2s_core::correlation::{build_spatial_covariance, AnchorGrid};
use p2s_core::dataset::generate_dataset;
use p2s_core::network::{p2s_forward_batch, train_p2s, LrSchedule, TrainConfig};
use p2s_core::rng::substream;
use p2s_core::{brute_force_frame, sample_anchor_field, OpticalConfig, Renderer, SourceImage};
use rand::Rng;
use std::time::Instant;

fn main() {
    let mut config = OpticalConfig::default();
    config.phase_grid_px = 64;
    config.psf_size_px = 33;
    config.zernike_count = 36;

    let t = Instant::now();
    let ds = generate_dataset(&config, 6000, (0.2, 8.0), 2024).unwrap();
    println!("corpus 6000 @ P=64: {:.1}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let basis = fit_pca(&ds, 100).unwrap();
    println!("PCA M=100: {:.1}s  evr={:.4}", t.elapsed().as_secs_f64(), basis.explained_variance_ratio);

    let t = Instant::now();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 32,
        learning_rate: 1.0,
        momentum: 0.9,
        schedule: LrSchedule::StepDecay { every: 70, factor: 0.3 },
        validation_fraction: 0.15,
        hidden: (128, 128),
        activation: p2s_core::network::Activation::Isru,
        seed: 7,
    };
    let (weights, report) = train_p2s(&ds, &basis, &cfg).unwrap();
    println!("train 200 epochs: {:.1}s  val {:.3e} mean-pred {:.3e}", t.elapsed().as_secs_f64(), report.val_loss.last().unwrap(), report.mean_predictor_val_loss);

    // Criterion 5: median relative PSF reconstruction error, net vs floor,
    // on a held-out set (fresh seed).
    let held = generate_dataset(&config, 400, (0.2, 8.0), 9090).unwrap();
    let mut x = Array2::zeros((held.count(), held.k_in()));
    for i in 0..held.count() {
        for j in 0..held.k_in() {
            x[[i, j]] = held.alphas_high[[i, j]] as f64;
        }
    }
    let beta_net = p2s_forward_batch(&weights, &x).unwrap();
    let mut ratios = Vec::new();
    let mut floors = Vec::new();
    let mut nets = Vec::new();
    for i in 0..held.count() {
        let h = held.psf_f64(i);
        let hnorm: f64 = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bproj = project_psf(&h, &basis).unwrap();
        let rproj = reconstruct_psf(&bproj, &basis);
        let floor: f64 = h.iter().zip(rproj.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / hnorm;
        let bn: Vec<f64> = (0..basis.m()).map(|m| beta_net[[i, m]] as f64).collect();
        let rnet = reconstruct_psf(&bn, &basis);
        let err: f64 = h.iter().zip(rnet.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / hnorm;
        floors.push(floor);
        nets.push(err);
        ratios.push(err / floor);
    }
    let med = |v: &mut Vec<f64>| { v.sort_by(|a, b| a.partial_cmp(b).unwrap()); v[v.len() / 2] };
    println!("criterion5: median floor {:.4} median net {:.4} median ratio {:.3}", med(&mut floors.clone()), med(&mut nets.clone()), med(&mut nets)/med(&mut floors));

    // Criterion 4 probe: 32x32, D/r0 in {1,2,4}, seed 0.
    for d in [1.0, 2.0, 4.0] {
        let c = config.with_d_over_r0(d);
        for (h, w) in [(32usize, 32usize), (64, 64)] {
            let grid = AnchorGrid::for_image(16, h, w, &c).unwrap();
            let cov = build_spatial_covariance(&grid, &c).unwrap();
            let renderer = Renderer::new(c.clone(), basis.clone(), weights.clone(), cov).unwrap();
            let mut rng = substream(777, 0);
            let scene = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0));
            let x = SourceImage::gray(scene).unwrap();
            let t = Instant::now();
            let anchors = sample_anchor_field(renderer.covariance(), 42);
            let dense = p2s_core::interpolate_alpha(&anchors, h, w);
            let maps = renderer.maps_from_dense(&dense).unwrap();
            let fast = renderer.render_with_maps(&x, &maps, 42).unwrap();
            let oracle = brute_force_frame(&x, &dense, &c, false).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for (a, b) in fast.channels[0].iter().zip(oracle.channels[0].iter()) {
                num += (a - b) * (a - b);
                den += b * b;
            }
            println!("criterion4 d={d} {h}x{w}: rel l2 {:.4} ({:.1}s)", (num / den).sqrt(), t.elapsed().as_secs_f64());
        }
    }
}
