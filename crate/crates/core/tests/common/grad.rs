//! Finite-difference checks for every differentiable op and the whole detector.
//! Each check returns `(what, relative error)` pairs.

use facemine::geometry::generate_anchors;
use facemine::net::loss::{smooth_l1_loss, softmax_ce_loss};
use facemine::net::ops::{self, ConvSpec};
use facemine::net::{DetectorModel, Tensor};
use facemine::targets::{assign_targets, ohem_select, AnchorLabel, MatchConfig, OhemConfig, OhemSelection};
use facemine::{AnchorConfig, BBox, Delta, GroundTruth};
use rand::Rng;

use super::{away_from_zero, dot, numeric_grad, random_tensor, rel_err, rng, tiny_model};

pub type Report = Vec<(String, f64)>;

pub fn conv(kernel: usize, spec: ConvSpec, seed: u64) -> Report {
    let mut r = rng(seed);
    let (cin, cout) = (3, 4);
    let x = random_tensor(&mut r, [2, cin, 7, 6]);
    let w = random_tensor(&mut r, [cout, cin, kernel, kernel]);
    let b: Vec<f64> = (0..cout).map(|_| r.random_range(-1.0..1.0)).collect();
    let y = ops::conv2d_forward(&x, &w, &b, spec).unwrap();
    let probe = random_tensor(&mut r, y.shape());
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    let dx = ops::conv2d_backward(&x, &w, spec, &probe, &mut dw, &mut db, true)
        .unwrap()
        .unwrap();

    let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]| dot(&ops::conv2d_forward(x, w, b, spec).unwrap(), &probe);
    let shape_x = x.shape();
    let shape_w = w.shape();
    let nx = numeric_grad(&mut x.clone().into_vec(), |v| {
        f(&Tensor::from_vec(shape_x, v.to_vec()).unwrap(), &w, &b)
    });
    let nw = numeric_grad(&mut w.clone().into_vec(), |v| {
        f(&x, &Tensor::from_vec(shape_w, v.to_vec()).unwrap(), &b)
    });
    let nb = numeric_grad(&mut b.clone(), |v| f(&x, &w, v));
    let tag = format!(
        "conv{kernel}x{kernel} s{} p{} d{}",
        spec.stride, spec.pad, spec.dilation
    );
    vec![
        (format!("{tag} input"), rel_err(dx.data(), &nx)),
        (format!("{tag} weight"), rel_err(&dw, &nw)),
        (format!("{tag} bias"), rel_err(&db, &nb)),
    ]
}

pub fn relu(seed: u64) -> Report {
    let mut r = rng(seed);
    let x = away_from_zero(&mut r, [1, 3, 5, 4], 0.01);
    let y = ops::relu_forward(&x);
    let probe = random_tensor(&mut r, y.shape());
    let dx = ops::relu_backward(&y, &probe).unwrap();
    let shape = x.shape();
    let n = numeric_grad(&mut x.into_vec(), |v| {
        dot(
            &ops::relu_forward(&Tensor::from_vec(shape, v.to_vec()).unwrap()),
            &probe,
        )
    });
    vec![("relu".into(), rel_err(dx.data(), &n))]
}

pub fn maxpool(seed: u64) -> Report {
    let mut r = rng(seed);
    // distinct values spaced well apart so no window has a near tie
    let shape = [1, 2, 5, 7];
    let mut vals: Vec<f64> = (0..2 * 5 * 7).map(|i| i as f64 * 0.01).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let x = Tensor::from_vec(shape, vals).unwrap();
    let pool = ops::maxpool2x2_forward(&x);
    let probe = random_tensor(&mut r, pool.output.shape());
    let dx = ops::maxpool2x2_backward(shape, &pool.argmax, &probe).unwrap();
    let n = numeric_grad(&mut x.into_vec(), |v| {
        dot(
            &ops::maxpool2x2_forward(&Tensor::from_vec(shape, v.to_vec()).unwrap()).output,
            &probe,
        )
    });
    vec![("maxpool2x2 (odd sizes)".into(), rel_err(dx.data(), &n))]
}

pub fn concat(seed: u64) -> Report {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, [1, 2, 3, 3]);
    let b = random_tensor(&mut r, [1, 3, 3, 3]);
    let probe = random_tensor(&mut r, [1, 5, 3, 3]);
    let (ga, gb) = ops::split_channels(&probe, 2).unwrap();
    let sa = a.shape();
    let sb = b.shape();
    let na = numeric_grad(&mut a.clone().into_vec(), |v| {
        dot(
            &ops::concat_channels(&Tensor::from_vec(sa, v.to_vec()).unwrap(), &b).unwrap(),
            &probe,
        )
    });
    let nb = numeric_grad(&mut b.clone().into_vec(), |v| {
        dot(
            &ops::concat_channels(&a, &Tensor::from_vec(sb, v.to_vec()).unwrap()).unwrap(),
            &probe,
        )
    });
    vec![
        ("concat first".into(), rel_err(ga.data(), &na)),
        ("concat second".into(), rel_err(gb.data(), &nb)),
    ]
}

pub fn upsample(seed: u64) -> Report {
    let mut r = rng(seed);
    let shape = [1, 2, 3, 4];
    let x = random_tensor(&mut r, shape);
    let probe = random_tensor(&mut r, ops::bilinear_upsample_x2_forward(&x).shape());
    let dx = ops::bilinear_upsample_x2_backward(shape, &probe).unwrap();
    let n = numeric_grad(&mut x.into_vec(), |v| {
        dot(
            &ops::bilinear_upsample_x2_forward(&Tensor::from_vec(shape, v.to_vec()).unwrap()),
            &probe,
        )
    });
    vec![("bilinear upsample x2".into(), rel_err(dx.data(), &n))]
}

pub fn softmax_ce(seed: u64) -> Report {
    let mut r = rng(seed);
    let shape = [1, 6, 3, 4];
    let anchors = 3 * 12;
    let cls = Tensor::from_fn(shape, |_| r.random_range(-4.0..4.0));
    let labels: Vec<AnchorLabel> = (0..anchors)
        .map(|_| match r.random_range(0..3) {
            0 => AnchorLabel::Positive,
            1 => AnchorLabel::Negative,
            _ => AnchorLabel::Ignore,
        })
        .collect();
    let pick = |want: AnchorLabel, r: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        (0..anchors)
            .filter(|&a| labels[a] == want && r.random_bool(0.7))
            .collect()
    };
    let selection = OhemSelection {
        selected_pos: pick(AnchorLabel::Positive, &mut r),
        selected_neg: pick(AnchorLabel::Negative, &mut r),
    };
    let (_, g) = softmax_ce_loss(&cls, &labels, &selection).unwrap();
    let n = numeric_grad(&mut cls.into_vec(), |v| {
        softmax_ce_loss(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &labels, &selection)
            .unwrap()
            .0
    });
    vec![("softmax cross-entropy".into(), rel_err(g.data(), &n))]
}

pub fn smooth_l1(seed: u64) -> Report {
    let mut r = rng(seed);
    let shape = [1, 12, 3, 4];
    let anchors = 3 * 12;
    let targets: Vec<Delta> = (0..anchors)
        .map(|_| {
            Delta::new(
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            )
        })
        .collect();
    let mask: Vec<bool> = (0..anchors).map(|_| r.random_bool(0.6)).collect();
    // residuals on both sides of the |x| = 1 switch, never close to it
    let mut reg = Tensor::<f64>::zeros(shape);
    for (a, t) in targets.iter().enumerate() {
        for (c, tv) in t.to_array().into_iter().enumerate() {
            let mag = if r.random_bool(0.5) {
                r.random_range(0.05..0.9)
            } else {
                r.random_range(1.1..2.5)
            };
            let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            let o = facemine::net::loss::reg_offset(&reg, a, c);
            reg.data_mut()[o] = tv + sign * mag;
        }
    }
    let (_, g) = smooth_l1_loss(&reg, &targets, &mask).unwrap();
    let n = numeric_grad(&mut reg.into_vec(), |v| {
        smooth_l1_loss(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &targets, &mask)
            .unwrap()
            .0
    });
    vec![("smooth L1".into(), rel_err(g.data(), &n))]
}

pub fn all_ops() -> Report {
    let mut out = Vec::new();
    out.extend(conv(3, ConvSpec::same(3, 1), 1));
    out.extend(conv(3, ConvSpec::same(3, 2), 2));
    out.extend(conv(3, ConvSpec::same(3, 4), 3));
    out.extend(conv(3, ConvSpec::new(2, 1, 1), 4));
    out.extend(conv(1, ConvSpec::new(1, 0, 1), 5));
    out.extend(relu(6));
    out.extend(maxpool(7));
    out.extend(concat(8));
    out.extend(upsample(9));
    out.extend(softmax_ce(10));
    out.extend(smooth_l1(11));
    out
}

/// The training loss of the whole detector on one image: OHEM-selected
/// cross-entropy plus smooth L1, with labels and selection frozen.
pub fn end_to_end(seed: u64) -> Report {
    let mut r = rng(seed);
    let mut model = tiny_model(seed);
    let shape = [1, 3, 32, 32];
    let input = random_tensor(&mut r, shape);
    let gts = [
        GroundTruth::new(BBox::new(4.0, 6.0, 22.0, 26.0)),
        GroundTruth::new(BBox::new(14.0, 2.0, 30.0, 14.0)),
        GroundTruth::ignored(BBox::new(0.0, 20.0, 10.0, 31.0)),
    ];
    let grid = generate_anchors(32, 32, &AnchorConfig::default()).unwrap();
    let labeled = assign_targets(&grid, &gts, &MatchConfig::default()).unwrap();
    assert!(labeled.num_positive() > 0 && labeled.reg_mask.iter().any(|&m| m));
    let (out, cache) = model.forward(&input).unwrap();
    let ohem = OhemConfig {
        batch_anchors: 24,
        max_pos: 8,
    };
    let selection = ohem_select(&labeled.labels, &out.face_probs(), &ohem).unwrap();

    let loss = |m: &DetectorModel<f64>, x: &Tensor<f64>| {
        let o = m.predict(x).unwrap();
        let ce = softmax_ce_loss(&o.cls, &labeled.labels, &selection).unwrap().0;
        let l1 = smooth_l1_loss(&o.reg, &labeled.reg_targets, &labeled.reg_mask)
            .unwrap()
            .0;
        ce + l1
    };
    let (_, gc) = softmax_ce_loss(&out.cls, &labeled.labels, &selection).unwrap();
    let (_, gr) = smooth_l1_loss(&out.reg, &labeled.reg_targets, &labeled.reg_mask).unwrap();
    model.zero_grad();
    let dx = model.backward(&cache, &gc, &gr, true).unwrap().unwrap();

    let mut report = Vec::new();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let analytic = model.param(&name).unwrap().grad.clone();
        let mut probe = model.clone();
        let len = analytic.len();
        let numeric: Vec<f64> = (0..len)
            .map(|i| {
                let at = |probe: &mut DetectorModel<f64>, delta: f64| {
                    let p = probe.param_mut(&name).unwrap();
                    let keep = p.value.data()[i];
                    p.value.data_mut()[i] = keep + delta;
                    let l = loss(probe, &input);
                    probe.param_mut(&name).unwrap().value.data_mut()[i] = keep;
                    l
                };
                (at(&mut probe, super::FD_EPS) - at(&mut probe, -super::FD_EPS)) / (2.0 * super::FD_EPS)
            })
            .collect();
        report.push((format!("detector {name}"), rel_err(&analytic, &numeric)));
    }
    let n = numeric_grad(&mut input.clone().into_vec(), |v| {
        loss(&model, &Tensor::from_vec(shape, v.to_vec()).unwrap())
    });
    report.push(("detector input".into(), rel_err(dx.data(), &n)));
    report
}
