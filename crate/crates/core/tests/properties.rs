mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sfkit::decoder::{decode, DecoderConfig, DecoderWeights};
use sfkit::loss::{build_histogram, partition, scene_adaptive_loss, select_threshold};
use sfkit::metrics::{bucketed_normalized_epe, default_speed_edges, dynamic_iou, epe, threeway_epe, ObjectClass};
use sfkit::nn::{FeatureMatrix, Initializer, Mlp};
use sfkit::pointcloud::{
    decode_scene, encode_scene, synth_scene, warp_to_frame, ClassLabel, FlowField, Point, PointCloud, Pose,
    SceneConfig, SceneSequence, FRAME_T,
};
use sfkit::serialization::{deserialize, morton_decode, morton_encode, morton_order, serialize};
use sfkit::ssm::{scan_blocked, scan_sequential, zoh_discretize, FlowSsmLayer, HiddenState, SsmParams, TokenSequence, ZohMode};
use sfkit::stdcb::{sfsm, stdcb_forward, DilationMode, SfsmWeights, StdcbWeights};
use sfkit::voxelizer::{devoxelize_coarse, pool_to_voxels, voxelize, SparseTensor4D, VoxelCoord, VoxelGrid};

fn cloud_strategy(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-12.0f64..12.0), 1..max)
}

fn to_cloud(v: &[[f64; 3]]) -> PointCloud {
    PointCloud::new(v.iter().map(|p| Point::from_array(*p)).collect(), 0)
}

fn labels_strategy(n: usize) -> impl Strategy<Value = Vec<ClassLabel>> {
    prop::collection::vec(
        prop_oneof![
            Just(ClassLabel::ForegroundDynamic),
            Just(ClassLabel::BackgroundStatic),
            Just(ClassLabel::ForegroundStatic)
        ],
        n,
    )
}

fn flow_strategy(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // pointcloud

    #[test]
    fn warping_is_an_isometry(pts in cloud_strategy(40), yaw in -3.1f64..3.1, t in prop::array::uniform3(-20.0f64..20.0)) {
        let c = to_cloud(&pts);
        let pose = Pose::yaw_translation(yaw, t);
        let w = warp_to_frame(&c, &pose).unwrap();
        for i in 0..c.len() {
            for j in 0..c.len() {
                let (a, b) = (c.points[i].distance(&c.points[j]), w.points[i].distance(&w.points[j]));
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            }
        }
        let back = warp_to_frame(&w, &pose.inverse()).unwrap();
        for (p, q) in c.points.iter().zip(&back.points) {
            prop_assert!(p.distance(q) <= 1e-9);
        }
    }

    #[test]
    fn synthetic_background_is_still(seed in any::<u64>(), n in 1usize..200) {
        let cfg = SceneConfig { background_points: n, ..Default::default() };
        let s = synth_scene(&cfg, seed).unwrap();
        prop_assert!(s.gt_flow.vectors[..n].iter().all(|v| *v == [0.0; 3]));
        prop_assert_eq!(s.mask.len(), s.frame_t().len());
    }

    #[test]
    fn scene_file_round_trip(seed in any::<u64>(), n in 0usize..100, with_poses in any::<bool>()) {
        let cfg = SceneConfig { background_points: n, ..Default::default() };
        let mut s = synth_scene(&cfg, seed).unwrap();
        if !with_poses {
            s.poses.clear();
        }
        let bytes = encode_scene(&s).unwrap();
        let back = decode_scene(&bytes).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(encode_scene(&back).unwrap(), bytes);
    }

    // voxelizer

    #[test]
    fn voxelization_translation_consistent(pts in cloud_strategy(60), d in prop::array::uniform3(-0.5f64..0.5)) {
        let grid = VoxelGrid::default();
        let delta = d;
        let shifted_grid = VoxelGrid::new(
            [grid.origin[0] + delta[0], grid.origin[1] + delta[1], grid.origin[2] + delta[2]],
            grid.cell_size,
            grid.extents,
        ).unwrap();
        let a = voxelize(&to_cloud(&pts), &grid).unwrap();
        let moved: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]]).collect();
        let b = voxelize(&to_cloud(&moved), &shifted_grid).unwrap();
        for i in 0..pts.len() {
            let (ca, cb) = (a.point_coord(i), b.point_coord(i));
            // a point sitting within rounding of a face may flip cells; skip those
            let near_face = (0..3).any(|k| (1.0 - a.offsets[i][k].abs()) < 1e-9);
            if near_face { continue; }
            prop_assert_eq!(ca, cb);
            for k in 0..3 {
                prop_assert!((a.offsets[i][k] - b.offsets[i][k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn voxel_membership_and_offsets(pts in cloud_strategy(120)) {
        let grid = VoxelGrid::default();
        let v = voxelize(&to_cloud(&pts), &grid).unwrap();
        let mut seen = vec![0usize; pts.len()];
        for vox in &v.voxels {
            for &m in &vox.members {
                seen[m] += 1;
            }
        }
        for i in 0..pts.len() {
            let inside = grid.locate(pts[i]).is_some();
            prop_assert_eq!(seen[i], inside as usize);
            prop_assert!(v.offsets[i].iter().all(|o| o.abs() <= 1.0 + 1e-12));
        }
        // brute-force grouping by coordinate agrees with the voxel lists
        for vox in &v.voxels {
            let expect: Vec<usize> = (0..pts.len()).filter(|&i| v.point_coord(i) == Some(vox.coord)).collect();
            prop_assert_eq!(&vox.members, &expect);
        }
    }

    #[test]
    fn pooling_copies_is_identity(pts in cloud_strategy(80), seed in any::<u64>()) {
        let v = voxelize(&to_cloud(&pts), &VoxelGrid::default()).unwrap();
        let mut r = rng(seed);
        let vf = FeatureMatrix::from_vec(v.voxels.len(), 3, (0..v.voxels.len() * 3).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let pooled = pool_to_voxels(&devoxelize_coarse(&vf, &v).unwrap(), &v).unwrap();
        for (a, b) in pooled.as_slice().iter().zip(vf.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    // serialization

    #[test]
    fn morton_round_trip_and_oracle(x in 0u32..1 << 21, y in 0u32..1 << 21, z in 0u32..1 << 21) {
        let c = VoxelCoord::new(x, y, z);
        let code = morton_encode(c).unwrap();
        prop_assert_eq!(code.0, naive_interleave(x, y, z));
        prop_assert_eq!(morton_decode(code), c);
    }

    #[test]
    fn serialize_inverse_and_stable(coords in prop::collection::vec(prop::array::uniform3(0u32..6), 0..200)) {
        let coords: Vec<VoxelCoord> = coords.iter().map(|c| VoxelCoord::new(c[0], c[1], c[2])).collect();
        let n = coords.len();
        let rows = FeatureMatrix::from_vec(n, 2, (0..2 * n).map(|i| i as f64 * 0.37 - 3.0).collect()).unwrap();
        let seq = serialize(&rows, &coords).unwrap();
        prop_assert_eq!(deserialize(&seq).unwrap(), rows);
        let perm = morton_order(&coords.iter().map(|c| Some(*c)).collect::<Vec<_>>()).unwrap();
        let order = perm.inverse();
        for w in order.windows(2) {
            let (a, b) = (naive_interleave(coords[w[0]].ix, coords[w[0]].iy, coords[w[0]].iz), naive_interleave(coords[w[1]].ix, coords[w[1]].iy, coords[w[1]].iz));
            prop_assert!(a < b || (a == b && w[0] < w[1]));
        }
    }

    // ssm

    #[test]
    fn blocked_scan_matches_sequential(seed in any::<u64>(), len in 1usize..600, block in 1usize..80, exact in any::<bool>()) {
        let mut r = rng(seed);
        let (b, d, s) = (2, 3, 4);
        let mk = |r: &mut rand_chacha::ChaCha8Rng, c: usize, lo: f64, hi: f64| TokenSequence::new(b, len, c, (0..b * len * c).map(|_| r.random_range(lo..hi)).collect()).unwrap();
        let a: Vec<f64> = (0..d * s).map(|_| -r.random_range(0.1..3.0)).collect();
        let bm = mk(&mut r, s, -1.0, 1.0);
        let cm = mk(&mut r, s, -1.0, 1.0);
        let delta = mk(&mut r, d, 1e-3, 0.5);
        let x = mk(&mut r, d, -1.0, 1.0);
        let h0 = HiddenState::new(b, d, s, (0..b * d * s).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let mode = if exact { ZohMode::Exact } else { ZohMode::Simplified };
        let disc = zoh_discretize(&a, &bm, &delta, mode).unwrap();
        prop_assert!(disc.a_bar.iter().all(|v| *v > 0.0 && *v < 1.0));
        let (ys, hs) = scan_sequential(&disc, &cm, &[0.3, -0.2, 0.1], &x, &h0).unwrap();
        let (yb, hb) = scan_blocked(&disc, &cm, &[0.3, -0.2, 0.1], &x, &h0, block).unwrap();
        prop_assert!(sfkit::cli::relative_gap(&yb.data, &ys.data) <= 1e-10);
        prop_assert!(sfkit::cli::relative_gap(&hb.data, &hs.data) <= 1e-10);

        // stability bound on the state
        let h0_inf = h0.data.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let max_abar = disc.a_bar.iter().cloned().fold(0.0, f64::max);
        let mut drive = 0.0f64;
        for bi in 0..b {
            for l in 0..len {
                for dd in 0..d {
                    for ss in 0..s {
                        let i = ((bi * len + l) * d + dd) * s + ss;
                        drive = drive.max((disc.b_bar[i] * x.token(bi, l)[dd]).abs());
                    }
                }
            }
        }
        let bound = h0_inf + drive / (1.0 - max_abar);
        prop_assert!(hs.data.iter().all(|v| v.abs() <= bound * (1.0 + 1e-12)));
    }

    #[test]
    fn flow_ssm_causal_and_linear(seed in any::<u64>(), len in 2usize..24, cut in 0usize..24, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let cut = cut % len;
        let (d, s, c) = (4, 3, 2);
        let p = SsmParams::seeded(&mut Initializer::new(seed), d, s, c);
        let mut r = rng(seed ^ 0x5eed);
        let v = |r: &mut rand_chacha::ChaCha8Rng, n: usize| (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let x1 = v(&mut r, len * d);
        let x2 = v(&mut r, len * d);
        let f = v(&mut r, len * c);
        let layer = FlowSsmLayer::new(p, ZohMode::Simplified);
        let run = |x: &[f64], f: &[f64]| {
            layer.forward(
                &TokenSequence::new(1, len, d, x.to_vec()).unwrap(),
                &TokenSequence::new(1, len, c, f.to_vec()).unwrap(),
                &HiddenState::zeros(1, d, s),
            ).unwrap().0.data
        };
        let y1 = run(&x1, &f);
        let y2 = run(&x2, &f);
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| alpha * a + beta * b).collect();
        let ym = run(&mix, &f);
        for i in 0..ym.len() {
            prop_assert!((ym[i] - (alpha * y1[i] + beta * y2[i])).abs() <= 1e-10);
        }
        // perturbing tokens after `cut` leaves outputs up to `cut` untouched
        let mut xp = x1.clone();
        let mut fp = f.clone();
        for v in &mut xp[(cut + 1) * d..] { *v += 1.0; }
        for v in &mut fp[(cut + 1) * c..] { *v -= 0.5; }
        let yp = run(&xp, &fp);
        prop_assert_eq!(&yp[..(cut + 1) * d], &y1[..(cut + 1) * d]);
    }

    // stdcb

    #[test]
    fn stdcb_preserves_active_set(seed in any::<u64>(), density in 0.05f64..0.6, literal in any::<bool>()) {
        let dense = Dense::random(seed, [5, 4, 4, 4], 3, density);
        let t = dense.to_sparse();
        let dil = if literal { DilationMode::Literal } else { DilationMode::Gap1 };
        let w = StdcbWeights::seeded(&mut Initializer::new(seed), 3, dil);
        let out = stdcb_forward(&t, &w).unwrap();
        prop_assert_eq!(out.keys(), t.keys());
        prop_assert!(dense_stdcb(&dense, &w).max_diff(&out) <= 1e-10);
    }

    #[test]
    fn sfsm_is_convex(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut r = rng(seed);
        let c = 3;
        let keys: Vec<[i32; 4]> = (0..20).map(|i| [i % 5, i / 5, 1, 2]).collect();
        let mk = |r: &mut rand_chacha::ChaCha8Rng| SparseTensor4D::from_entries(c, 5, keys.iter().map(|k| (*k, (0..c).map(|_| r.random_range(-scale..scale)).collect())).collect()).unwrap();
        let (m, a) = (mk(&mut r), mk(&mut r));
        let w = SfsmWeights::seeded(&mut Initializer::new(seed), c);
        let o = sfsm(&m, &a, &w).unwrap();
        for i in 0..o.data().len() {
            let (x, y, z) = (m.data()[i], a.data()[i], o.data()[i]);
            let slack = 4.0 * f64::EPSILON * x.abs().max(y.abs());
            prop_assert!(z >= x.min(y) - slack && z <= x.max(y) + slack);
        }
    }

    // decoder

    #[test]
    fn decoder_keeps_point_order(pts in cloud_strategy(60), seed in any::<u64>(), layers in 1usize..4) {
        let cloud = to_cloud(&pts);
        let vox = voxelize(&cloud, &VoxelGrid::default()).unwrap();
        let c = 4;
        let cfg = DecoderConfig { channels: c, state: 3, head_hidden: c, n_layers: layers, ..Default::default() };
        let mut init = Initializer::new(seed);
        let enc = Mlp::seeded(&mut init, 3, c, c);
        let w = DecoderWeights::seeded(&mut init, &cfg);
        let pf = sfkit::voxelizer::encode_point_features(&cloud, &enc).unwrap();
        let vf = pool_to_voxels(&pf, &vox).unwrap();
        let flow = decode(&vf, &pf, &vox, &w, &cfg).unwrap();
        prop_assert_eq!(flow.len(), cloud.len());
        prop_assert!(flow.vectors.iter().all(|v| v.iter().all(|x| x.is_finite())));

        // reversing the input reverses the output when no two points share a voxel
        let codes: Vec<_> = (0..cloud.len()).map(|i| vox.point_coord(i)).collect();
        let mut uniq = codes.clone();
        uniq.sort();
        uniq.dedup();
        if uniq.len() == codes.len() {
            let rev: Vec<[f64; 3]> = pts.iter().rev().copied().collect();
            let rc = to_cloud(&rev);
            let rvox = voxelize(&rc, &VoxelGrid::default()).unwrap();
            let rpf = sfkit::voxelizer::encode_point_features(&rc, &enc).unwrap();
            let rvf = pool_to_voxels(&rpf, &rvox).unwrap();
            let rflow = decode(&rvf, &rpf, &rvox, &w, &cfg).unwrap();
            let n = flow.len();
            for i in 0..n {
                for k in 0..3 {
                    prop_assert!((rflow.vectors[n - 1 - i][k] - flow.vectors[i][k]).abs() <= 1e-12);
                }
            }
        }
    }

    // loss

    #[test]
    fn histogram_and_threshold_invariants(gt in flow_strategy(60), k in 2usize..300) {
        let g = FlowField::new(gt);
        let h = build_histogram(&g, k).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<u64>(), h.n);
        let w = h.weights();
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let o = bin_oracle(&g, k);
        prop_assert_eq!(&h.counts, &o.counts);
        let t = select_threshold(&h);
        prop_assert!(t.alpha <= k && t.r_alpha >= 0.0 && t.r_alpha <= h.r_max);
        prop_assert_eq!((t.alpha, t.r_alpha, t.fallback), (o.alpha, o.r_alpha, o.fallback));
        let (st, dy) = partition(&g, &t);
        prop_assert_eq!((st, dy), (o.statics, o.dynamics));
    }

    #[test]
    fn partition_depends_only_on_gt(gt in flow_strategy(40), p1 in flow_strategy(40), p2 in flow_strategy(40)) {
        let g = FlowField::new(gt);
        let a = scene_adaptive_loss(&FlowField::new(p1), &g, 50).unwrap();
        let b = scene_adaptive_loss(&FlowField::new(p2), &g, 50).unwrap();
        prop_assert_eq!((a.threshold, a.n_static, a.n_dynamic), (b.threshold, b.n_static, b.n_dynamic));
        prop_assert!(a.total >= a.static_term.max(a.dynamic_term) && a.static_term >= 0.0 && a.dynamic_term >= 0.0);
        prop_assert_eq!(a.total, a.static_term + a.dynamic_term);
    }

    #[test]
    fn partition_is_scale_free(gt in flow_strategy(50), c in 0.1f64..10.0) {
        let g = FlowField::new(gt);
        let scaled = FlowField::new(g.vectors.iter().map(|v| v.map(|x| x * c)).collect());
        let part = |f: &FlowField| partition(f, &select_threshold(&build_histogram(f, 100).unwrap()));
        prop_assert_eq!(part(&g), part(&scaled));
    }

    // metrics

    #[test]
    fn epe_symmetric_and_translation_invariant(a in flow_strategy(30), b in flow_strategy(30), t in prop::array::uniform3(-3.0f64..3.0)) {
        let (fa, fb) = (FlowField::new(a.clone()), FlowField::new(b.clone()));
        prop_assert_eq!(epe(&fa, &fb).unwrap(), epe(&fb, &fa).unwrap());
        let shift = |v: &[[f64; 3]]| FlowField::new(v.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect());
        let x = sfkit::metrics::average_epe(&fa, &fb).unwrap();
        let y = sfkit::metrics::average_epe(&shift(&a), &shift(&b)).unwrap();
        prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
    }

    #[test]
    fn threeway_within_member_range(pred in flow_strategy(40), gt in flow_strategy(40), labels in labels_strategy(40)) {
        let (p, g) = (FlowField::new(pred), FlowField::new(gt));
        let e = epe(&p, &g).unwrap();
        let tw = threeway_epe(&p, &g, &labels).unwrap();
        let subsets = [(tw.fd, ClassLabel::ForegroundDynamic), (tw.bs, ClassLabel::BackgroundStatic), (tw.fs, ClassLabel::ForegroundStatic)];
        for (mean, lab) in subsets {
            let members: Vec<f64> = (0..e.len()).filter(|&i| labels[i] == lab).map(|i| e[i]).collect();
            match mean {
                None => prop_assert!(members.is_empty()),
                Some(m) => {
                    let lo = members.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = members.iter().cloned().fold(0.0, f64::max);
                    prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn bucketed_is_scale_covariant(pred in flow_strategy(40), gt in flow_strategy(40), labels in labels_strategy(40), c in 0.5f64..2.0) {
        // scale dt with the fields so every point stays in its speed bucket
        let (p, g) = (FlowField::new(pred), FlowField::new(gt));
        let classes = vec![ObjectClass::Car; 40];
        let sc = |f: &FlowField| FlowField::new(f.vectors.iter().map(|v| v.map(|x| x * c)).collect());
        let a = bucketed_normalized_epe(&p, &g, &labels, &classes, 0.1, &default_speed_edges()).unwrap();
        let b = bucketed_normalized_epe(&sc(&p), &sc(&g), &labels, &classes, 0.1 * c, &default_speed_edges()).unwrap();
        match (a.dynamic_mean, b.dynamic_mean) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0)),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn iou_monotone_under_shrinking(gt in flow_strategy(40), extra in prop::collection::vec(any::<bool>(), 40)) {
        // predicted moving set = true moving set plus some extras; removing extras never lowers IoU
        let g = FlowField::new(gt);
        let moving = |v: &[f64; 3]| sfkit::pointcloud::norm3(*v) > 0.05;
        let build = |keep: usize| {
            let mut seen = 0;
            FlowField::new(g.vectors.iter().zip(&extra).map(|(v, e)| {
                if moving(v) { *v } else if *e { seen += 1; if seen <= keep { [1.0, 0.0, 0.0] } else { [0.0; 3] } } else { [0.0; 3] }
            }).collect())
        };
        let n_extra = g.vectors.iter().zip(&extra).filter(|(v, e)| !moving(v) && **e).count();
        let mut last = 0.0;
        for keep in (0..=n_extra).rev() {
            let iou = dynamic_iou(&build(keep), &g, 0.05).unwrap();
            prop_assert!((0.0..=1.0).contains(&iou));
            prop_assert!(iou >= last);
            last = iou;
        }
        prop_assert_eq!(last, 1.0);
    }
}

#[test]
fn morton_locality_beats_row_major() {
    let k = 8u32;
    let mut cells = Vec::new();
    for x in 0..k {
        for y in 0..k {
            for z in 0..k {
                cells.push(VoxelCoord::new(x, y, z));
            }
        }
    }
    let perm = morton_order(&cells.iter().map(|c| Some(*c)).collect::<Vec<_>>()).unwrap();
    let rank_m = perm.forward();
    let idx = |x: u32, y: u32, z: u32| ((x * k + y) * k + z) as usize;
    let (mut dm, mut dr) = (Vec::new(), Vec::new());
    for x in 0..k {
        for y in 0..k {
            for z in 0..k {
                let here = idx(x, y, z);
                for (dx, dy, dz) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                    let (a, b, c) = (x + dx, y + dy, z + dz);
                    if a < k && b < k && c < k {
                        let there = idx(a, b, c);
                        dm.push(rank_m[here].abs_diff(rank_m[there]) as f64);
                        dr.push(here.abs_diff(there) as f64);
                    }
                }
            }
        }
    }
    // Both orders are monotone along every axis, so the plain mean telescopes
    // to the same value; locality shows up in the typical gap instead.
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!(mean(&dm), mean(&dr));
    let geo = |v: &[f64]| (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp();
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(geo(&dm) < geo(&dr), "geometric mean: morton {} vs row-major {}", geo(&dm), geo(&dr));
    assert!(median(&mut dm) < median(&mut dr));
}

#[test]
fn more_decoder_layers_keep_shape() {
    let scene: SceneSequence = synth_scene(&SceneConfig { background_points: 150, ..Default::default() }, 3).unwrap();
    let cloud = &scene.frames[FRAME_T];
    let vox = voxelize(cloud, &VoxelGrid::default()).unwrap();
    let mut outs = Vec::new();
    for layers in 1..=5 {
        let cfg = DecoderConfig { channels: 4, state: 3, head_hidden: 4, n_layers: layers, ..Default::default() };
        let mut init = Initializer::new(17);
        let enc = Mlp::seeded(&mut init, 3, 4, 4);
        let w = DecoderWeights::seeded(&mut init, &cfg);
        let pf = sfkit::voxelizer::encode_point_features(cloud, &enc).unwrap();
        let vf = pool_to_voxels(&pf, &vox).unwrap();
        let f = decode(&vf, &pf, &vox, &w, &cfg).unwrap();
        assert_eq!(f.len(), cloud.len());
        outs.push(f);
    }
    assert!(outs.windows(2).all(|w| w[0] != w[1]));
}

#[test]
fn partition_converges_on_two_clusters() {
    let mut v = vec![[0.0; 3]; 300];
    v.extend((0..30).map(|i| [5.0 + i as f64 * 0.01, 0.0, 0.0]));
    let g = FlowField::new(v);
    for k in [10, 100, 1000] {
        let (st, dy) = partition(&g, &select_threshold(&build_histogram(&g, k).unwrap()));
        assert_eq!(st, (0..300).collect::<Vec<_>>(), "K = {k}");
        assert_eq!(dy, (300..330).collect::<Vec<_>>(), "K = {k}");
    }
}

#[test]
fn sparse_tensor_rejects_non_finite() {
    assert!(SparseTensor4D::from_entries(1, 5, vec![([0, 0, 0, 0], vec![f64::NAN])]).is_err());
    let mut t = SparseTensor4D::empty(1, 5);
    assert!(t.insert([0, 0, 0, 0], &[f64::INFINITY]).is_err());
}
