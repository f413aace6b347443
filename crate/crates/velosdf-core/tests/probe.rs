//! Temporary diagnostic probe for a trained checkpoint (not part of the
//! suite; run with --nocapture and delete afterwards).

use velosdf::autodiff::Tape;
use velosdf::field::{ray_sample_inputs, sample_ray_depths, FieldNetworks};
use velosdf::geometry::Pose;
use velosdf::io::checkpoint::load_checkpoint;
use velosdf::io::dataset::load_dataset;
use velosdf::losses::{loss_flow, loss_photo, loss_rgb, PhotoNeighbor};
use velosdf::motion::MotionNetwork;
use velosdf::trainer::{render_views, training_views, TimeAxis, TrainConfig};

fn group_norm(grads: &std::collections::BTreeMap<String, Vec<f64>>, prefix: &str) -> f64 {
    grads
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .flat_map(|(_, v)| v.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

#[test]
fn probe_checkpoint() {
    let ds = load_dataset(std::path::Path::new("/tmp/orbiter"), 8).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.rays_per_batch = 64;
    cfg.samples_per_ray = 16;
    cfg.eik_points = 64;
    cfg.flow_top_k = 1;
    let field = FieldNetworks::new(cfg.field.clone());
    let motion = MotionNetwork::new(cfg.motion.clone());
    let ckpt = load_checkpoint(std::path::Path::new("/tmp/cal_a/stage1.ckpt")).unwrap();
    let store = ckpt.store;
    let views = training_views(&ds);
    let axis = TimeAxis::from_times(&ds.times).unwrap();
    let icfg = cfg.integration(axis.frame_dt);
    let intr = &ds.intrinsics;

    // 1. predicted (omega, v) across time
    {
        let tape = Tape::new();
        let mb = motion.bind(&tape, &store);
        for &t in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let v6 = motion.velocity_at(&mb, &tape.constant(1, 1, vec![t])).value();
            let wn = (v6[0] * v6[0] + v6[1] * v6[1] + v6[2] * v6[2]).sqrt();
            let vn = (v6[3] * v6[3] + v6[4] * v6[4] + v6[5] * v6[5]).sqrt();
            println!("t={t:.2} |omega|={wn:.4} |v|={vn:.4}  (true ~1.571, ~?)");
        }
    }

    // 2. identity-pose renders at t = 0, 0.5, 1: color vs depth variation
    {
        let idp = Pose::identity();
        let r0 = &render_views(&field, &store, &[idp.clone()], intr, &cfg, 0.0)[0];
        let r5 = &render_views(&field, &store, &[idp.clone()], intr, &cfg, 0.5)[0];
        let r1 = &render_views(&field, &store, &[idp], intr, &cfg, 1.0)[0];
        let md = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        };
        println!(
            "color  diff  0 vs .5: {:.4}   .5 vs 1: {:.4}",
            md(&r0.image, &r5.image),
            md(&r5.image, &r1.image)
        );
        println!(
            "depth  diff  0 vs .5: {:.4}   .5 vs 1: {:.4}",
            md(&r0.depth, &r5.depth),
            md(&r5.depth, &r1.depth)
        );
        // how different are the gt images themselves
        println!(
            "gt img diff  0 vs 11: {:.4}  11 vs 23: {:.4}",
            md(&ds.images[0], &ds.images[11]),
            md(&ds.images[11], &ds.images[23])
        );
    }

    // 3. mean |ds/dt| at rendered surface points of the middle frame
    {
        let t = ds.times[11];
        let idp = Pose::identity();
        let r = &render_views(&field, &store, &[idp], intr, &cfg, t)[0];
        let mut pts = Vec::new();
        let mut n = 0usize;
        for row in (0..intr.height).step_by(5) {
            for col in (0..intr.width).step_by(5) {
                let d = r.depth[row * intr.width + col];
                if d > 0.1 {
                    let ray = intr.pixel_ray(row, col);
                    pts.push((0, d * ray.direction[0]));
                    pts.push((1, d * ray.direction[1]));
                    pts.push((2, d * ray.direction[2]));
                    n += 1;
                }
            }
        }
        let mut data = vec![0.0; 3 * n];
        for (j, chunk) in pts.chunks(3).enumerate() {
            for &(a, v) in chunk {
                data[a * n + j] = v;
            }
        }
        let tape = Tape::new();
        let fb = field.bind(&tape, &store);
        let dsdt = field
            .sdf_time_derivative(&fb, &tape.constant(3, n, data), t, axis.t_range)
            .value();
        let mean = dsdt.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        println!("mean |ds/dt| at {n} surface points: {mean:.5}");
    }

    // 4. photo-loss landscape: identity vs ground-truth relative pose
    {
        let gt = ds.gt_traj.as_ref().unwrap();
        let i = 11usize;
        let j = 12usize;
        let t = ds.times[i];
        // surface points in cam-i coords from gt depth (ray distance)
        let dep = &ds.gt_depths.as_ref().unwrap()[i];
        let mut cols = Vec::new();
        for row in 0..intr.height {
            for col in 0..intr.width {
                let d = dep[row * intr.width + col];
                if d > 0.1 {
                    let ray = intr.pixel_ray(row, col);
                    cols.push((
                        [
                            d * ray.direction[0],
                            d * ray.direction[1],
                            d * ray.direction[2],
                        ],
                        [
                            ds.images[i][(row * intr.width + col) * 3],
                            ds.images[i][(row * intr.width + col) * 3 + 1],
                            ds.images[i][(row * intr.width + col) * 3 + 2],
                        ],
                    ));
                }
            }
        }
        let n = cols.len();
        let mut xs = vec![0.0; 3 * n];
        let mut cs = vec![0.0; 3 * n];
        for (k, (x, c)) in cols.iter().enumerate() {
            for a in 0..3 {
                xs[a * n + k] = x[a];
                cs[a * n + k] = c[a];
            }
        }
        let tape = Tape::new();
        let surf = tape.constant(3, n, xs.clone());
        let src = tape.constant(3, n, cs);
        let mk = |p: &Pose| PhotoNeighbor {
            rotation: tape.constant(
                3,
                3,
                p.rotation.iter().flat_map(|r| r.iter().copied()).collect(),
            ),
            translation: tape.constant(3, 1, p.translation.to_vec()),
            image: &ds.images[j],
        };
        let candidates = [
            ("identity       ", Pose::identity()),
            ("Wj^-1 o Wi     ", gt[j].inverse().compose(&gt[i])),
            ("Wj o Wi^-1     ", gt[j].compose(&gt[i].inverse())),
            ("Wi^-1 o Wj     ", gt[i].inverse().compose(&gt[j])),
            ("Wi o Wj^-1     ", gt[i].compose(&gt[j].inverse())),
        ];
        for (name, b) in &candidates {
            let (l, v) = loss_photo(&surf, &src, &[mk(b)], intr).unwrap();
            // depth reprojection: mean |z_pred - gt_depth_j(u,v)| over valid
            let depj = &ds.gt_depths.as_ref().unwrap()[j];
            let mut derr = 0.0;
            let mut dn = 0usize;
            for k in 0..n {
                let x = [xs[k], xs[n + k], xs[2 * n + k]];
                let p = b.apply(x);
                if p[2] > 1e-6 {
                    let u = intr.fx * p[0] / p[2] + intr.cx;
                    let v = intr.fy * p[1] / p[2] + intr.cy;
                    let (ui, vi) = (u.round() as i64, v.round() as i64);
                    if ui >= 0 && vi >= 0 && (ui as usize) < intr.width && (vi as usize) < intr.height {
                        let d = depj[vi as usize * intr.width + ui as usize];
                        if d > 0.1 {
                            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                            derr += (norm - d).abs();
                            dn += 1;
                        }
                    }
                }
            }
            println!(
                "photo[{name}] = {:.5} ({v} valid)  depth reproj err {:.4} ({dn})",
                l.scalar_value(),
                derr / dn.max(1) as f64
            );
        }
        println!("t_i={t:.3}");
        // which convention puts unprojected points on the analytic surface?
        let scene = velosdf::synthetic::orbiter_scene();
        let (mut e_fwd, mut e_inv) = (0.0, 0.0);
        let wi = &gt[i];
        let wi_inv = wi.inverse();
        for k in 0..n {
            let x = [xs[k], xs[n + k], xs[2 * n + k]];
            e_fwd += velosdf::synthetic::scene_sdf(&scene, wi.apply(x)).abs();
            e_inv += velosdf::synthetic::scene_sdf(&scene, wi_inv.apply(x)).abs();
        }
        println!(
            "mean |sdf| of unprojected pts: W_i(x) {:.5}   W_i^-1(x) {:.5}",
            e_fwd / n as f64,
            e_inv / n as f64
        );
    }

    // 5. gradient norms per parameter group for one mixed batch
    {
        let view = &views[10];
        let nb = &views[11];
        let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(123u64);
        let mut rays = Vec::new();
        let mut targets = vec![0.0; 3 * 64];
        for r in 0..64usize {
            let p = rand::Rng::gen_range(&mut rng, 0..intr.width * intr.height);
            rays.push(intr.pixel_ray(p / intr.width, p % intr.width));
            for a in 0..3 {
                targets[a * 64 + r] = view.pixels[p * 3 + a];
            }
        }
        let dists = sample_ray_depths(cfg.near, cfg.far, cfg.samples_per_ray, 64, true, &mut rng);
        let tape = Tape::new();
        let fb = field.bind(&tape, &store);
        let mb = motion.bind(&tape, &store);
        let inputs = ray_sample_inputs(&tape, &rays, &dists, cfg.samples_per_ray, view.time);
        let rendered = field.render(&fb, &inputs, cfg.background);
        let tgt = tape.constant(3, 64, targets);
        let l_rgb = loss_rgb(&rendered.color, &tgt).unwrap();
        let l_flow = loss_flow(
            &field,
            &fb,
            &motion,
            &mb,
            &inputs,
            &rendered.weights,
            view.time,
            axis.t_range,
            cfg.flow_top_k,
        )
        .unwrap();
        let (rot, trans) = motion.pose_between(&mb, view.time, nb.time, &icfg).unwrap();
        let (l_photo, _valid) = loss_photo(
            &rendered.surface,
            &tgt,
            &[PhotoNeighbor {
                rotation: rot,
                translation: trans,
                image: nb.pixels,
            }],
            intr,
        )
        .unwrap();
        for (name, loss) in [("rgb", &l_rgb), ("flow", &l_flow), ("photo", &l_photo)] {
            let g = tape.backward(loss).unwrap().by_name(&tape);
            println!(
                "{name:5} value {:.5}  |g_motion| {:.3e}  |g_sdf| {:.3e}  |g_color| {:.3e}",
                loss.scalar_value(),
                group_norm(&g, "motion."),
                group_norm(&g, "sdf."),
                group_norm(&g, "color.")
            );
        }
    }
}
