//! Encoder checks against straight-line reference implementations.

use ftune::encoder::{attention, block_forward, encode, init_model, InitScheme, ModelConfig, ParameterSet};
use ftune::masking::{BinaryMask, MaskableSet};
use ftune::numerics::{RngStream, Tensor};

fn setup(seed: u64) -> (ModelConfig, ParameterSet) {
    let cfg = ModelConfig::default();
    let p = init_model(&cfg, InitScheme::Uniform, &RngStream::named(seed, "init")).unwrap();
    (cfg, p)
}

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn affine(x: &Mat, p: &ParameterSet, prefix: &str) -> Mat {
    let w = to_mat(p.get(&format!("{prefix}.w")).unwrap());
    let b = p.get(&format!("{prefix}.b")).unwrap().data().to_vec();
    mm(x, &w).into_iter().map(|r| r.iter().zip(&b).map(|(v, c)| v + c).collect()).collect()
}

fn ln(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let m = r.iter().sum::<f64>() / n;
            let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
            r.iter().enumerate().map(|(i, a)| (a - m) / (v + eps).sqrt() * gain[i] + bias[i]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// One head at a time with explicit loops.
fn naive_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let (s, h) = (q.len(), q[0].len());
    let d = h / heads;
    let mut out = vec![vec![0.0; h]; s];
    for hd in 0..heads {
        let cols = hd * d..(hd + 1) * d;
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..s).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    a.iter().flatten().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn attention_matches_per_head_loop() {
    let mut rng = RngStream::named(5, "att");
    let mk = |rng: &mut RngStream| Tensor::new(vec![4, 8], (0..32).map(|_| rng.normal()).collect()).unwrap();
    let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
    let got = attention(&q, &k, &v, 2).unwrap();
    let want = naive_attention(&to_mat(&q), &to_mat(&k), &to_mat(&v), 2);
    assert!(max_diff(&want, &got) < 1e-12);
}

#[test]
fn block_matches_straight_line_reference() {
    let (cfg, p) = setup(8);
    let mut rng = RngStream::named(8, "x");
    for seq in [1usize, 5, 16] {
        let x = Tensor::new(vec![seq, 32], (0..seq * 32).map(|_| rng.normal()).collect()).unwrap();
        for b in 1..=cfg.num_blocks {
            let got = block_forward(&p, &cfg, b, &x, &mut rng, false).unwrap();
            assert_eq!(got.shape(), x.shape());
            let xm = to_mat(&x);
            let pre = format!("block{b}");
            let q = affine(&xm, &p, &format!("{pre}.attn.q"));
            let k = affine(&xm, &p, &format!("{pre}.attn.k"));
            let v = affine(&xm, &p, &format!("{pre}.attn.v"));
            let a = affine(&naive_attention(&q, &k, &v, cfg.num_heads), &p, &format!("{pre}.attn.d"));
            let res: Mat = xm.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(u, w)| u + w).collect()).collect();
            let g = |n: &str| p.get(&format!("{pre}.{n}")).unwrap().data().to_vec();
            let inner = ln(&res, &g("ln1.gain"), &g("ln1.bias"), cfg.layernorm_eps);
            let hidden: Mat = affine(&inner, &p, &format!("{pre}.ff.in"))
                .into_iter()
                .map(|r| r.into_iter().map(gelu).collect())
                .collect();
            let ff = affine(&hidden, &p, &format!("{pre}.ff.out"));
            let res2: Mat = inner.iter().zip(&ff).map(|(r, s)| r.iter().zip(s).map(|(u, w)| u + w).collect()).collect();
            let want = ln(&res2, &g("ln2.gain"), &g("ln2.bias"), cfg.layernorm_eps);
            assert!(max_diff(&want, &got) < 1e-10, "block {b} seq {seq}");
        }
    }
}

#[test]
fn all_ones_mask_is_bitwise_identity() {
    let (cfg, p) = setup(9);
    let ones = BinaryMask::ones(&p, &MaskableSet::default_for(&cfg, true)).unwrap();
    let tokens = [0usize, 17, 40, 5, 63, 22, 9];
    for training in [false, true] {
        let mut r1 = RngStream::named(9, "dropout");
        let mut r2 = RngStream::named(9, "dropout");
        let a = encode(&p, &cfg, None, &tokens, &mut r1, training).unwrap();
        let b = encode(&p, &cfg, Some(&ones), &tokens, &mut r2, training).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn pooled_output_in_tanh_range() {
    let (cfg, p) = setup(10);
    let mut rng = RngStream::named(10, "tok");
    for len in 1..=cfg.max_seq_len {
        let tokens: Vec<usize> = (0..len).map(|_| rng.below(cfg.vocab_size)).collect();
        let y = encode(&p, &cfg, None, &tokens, &mut rng, false).unwrap();
        assert_eq!(y.len(), cfg.hidden_size);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }
}
