mod common;

use common::{randn, randomize, rng};
use mst_core::backbone::{AttentionBlock, Backbone, PatchEmbed, Role};
use mst_core::params::{Ctx, Mode, ParamStore};
use mst_core::{Tensor, TrackerConfig};

fn small() -> TrackerConfig {
    TrackerConfig {
        patch_size: 4,
        embed_dim: 8,
        num_layers: 3,
        num_heads: 2,
        template_size: 8,
        search_size: 12,
        ssd_state_count: 4,
        head_channels: 8,
        ..TrackerConfig::desk()
    }
}

fn set(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    assert_eq!(store.get(id).shape(), t.shape(), "{name}");
    *store.get_mut(id) = t;
}

fn get(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    store.get(store.id(name).unwrap()).clone()
}

fn layer_norm_rows(x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>) -> Tensor<f64> {
    let (r, c) = x.dims2().unwrap();
    Tensor::from_fn(&[r, c], |idx| {
        let (i, j) = (idx / c, idx % c);
        let row: Vec<f64> = (0..c).map(|k| x.at2(i, k)).collect();
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        (row[j] - mean) / (var + 1e-10).sqrt() * gamma.data()[j] + beta.data()[j]
    })
}

fn linear(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let y = x.matmul_bt(w).unwrap();
    let n = b.len();
    Tensor::from_fn(y.shape(), |i| y.data()[i] + b.data()[i % n])
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

/// Pre-norm block with every head's `QKᵀ` materialised in explicit loops.
fn block_oracle(store: &ParamStore<f64>, name: &str, x: &Tensor<f64>, heads: usize) -> Tensor<f64> {
    let p = |s: &str| get(store, &format!("{name}.{s}"));
    let (l, d) = x.dims2().unwrap();
    let dk = d / heads;
    let h = layer_norm_rows(x, &p("ln1.gamma"), &p("ln1.beta"));
    let qkv = linear(&h, &p("qkv.w"), &p("qkv.b"));
    let mut cat = Tensor::zeros(&[l, d]);
    for head in 0..heads {
        let q = |i: usize, c: usize| qkv.at2(i, head * dk + c);
        let k = |i: usize, c: usize| qkv.at2(i, d + head * dk + c);
        let v = |i: usize, c: usize| qkv.at2(i, 2 * d + head * dk + c);
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..dk).map(|c| q(i, c) * k(j, c)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for c in 0..dk {
                let o: f64 = (0..l).map(|j| (scores[j] - mx).exp() / z * v(j, c)).sum();
                cat.data_mut()[i * d + head * dk + c] = o;
            }
        }
    }
    let x1 = x.add(&linear(&cat, &p("proj.w"), &p("proj.b"))).unwrap();
    let h = layer_norm_rows(&x1, &p("ln2.gamma"), &p("ln2.beta"));
    let h = linear(&h, &p("fc1.w"), &p("fc1.b")).map(gelu);
    x1.add(&linear(&h, &p("fc2.w"), &p("fc2.b"))).unwrap()
}

fn run_block(store: &ParamStore<f64>, block: &AttentionBlock, x: &Tensor<f64>) -> Tensor<f64> {
    let mut ctx = Ctx::new(store, Mode::Eval);
    let v = ctx.input(x.clone()).unwrap();
    let y = block.forward(&mut ctx, v).unwrap();
    ctx.value(y).clone()
}

#[test]
fn attention_block_matches_per_head_loops() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, &mut r, "b", 8, 2, 16);
    randomize(&mut store, &mut r, 0.5);
    let x = randn(&mut r, &[4, 8], 1.0);
    let got = run_block(&store, &block, &x);
    let want = block_oracle(&store, "b", &x, 2);
    assert!(got.max_abs_diff(&want).unwrap() < 1e-10);
}

#[test]
fn single_token_attends_to_itself() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, &mut r, "b", 6, 3, 12);
    randomize(&mut store, &mut r, 0.5);
    for n in ["fc2.w", "fc2.b"] {
        let shape = get(&store, &format!("b.{n}")).shape().to_vec();
        set(&mut store, &format!("b.{n}"), Tensor::zeros(&shape));
    }
    let x = randn(&mut r, &[1, 6], 1.0);
    // one key: every head returns its own V, so the block is x + proj(V)
    let h = layer_norm_rows(&x, &get(&store, "b.ln1.gamma"), &get(&store, "b.ln1.beta"));
    let qkv = linear(&h, &get(&store, "b.qkv.w"), &get(&store, "b.qkv.b"));
    let v = qkv.narrow(1, 12, 6).unwrap();
    let want = x.add(&linear(&v, &get(&store, "b.proj.w"), &get(&store, "b.proj.b"))).unwrap();
    assert!(run_block(&store, &block, &x).max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn zero_weight_block_is_identity() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, &mut r, "b", 8, 2, 16);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let x = randn(&mut r, &[5, 8], 1.0);
    assert_eq!(run_block(&store, &block, &x), x);
}

#[test]
fn patch_embed_token_counts_at_full_size() {
    let cfg = TrackerConfig::vit_tiny();
    let mut store = ParamStore::<f64>::new();
    let embed = PatchEmbed::new(&mut store, &mut rng(4), &cfg);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let z = embed.forward(&mut ctx, &Tensor::zeros(&[128, 128, 3]), Role::Template).unwrap();
    let x = embed.forward(&mut ctx, &Tensor::zeros(&[256, 256, 3]), Role::Search).unwrap();
    assert_eq!(ctx.tape.shape(z), &[64, 192]);
    assert_eq!(ctx.tape.shape(x), &[256, 192]);
    assert_eq!(cfg.seq_len(), 320);
    let err = embed.forward(&mut ctx, &Tensor::zeros(&[64, 64, 3]), Role::Search).unwrap_err();
    assert!(matches!(err, mst_core::Error::Config(_)), "{err}");
}

#[test]
fn patch_embed_zero_weights_and_direct_projection() {
    let cfg = small();
    let mut r = rng(5);
    let mut store = ParamStore::<f64>::new();
    let embed = PatchEmbed::new(&mut store, &mut r, &cfg);
    let pos = get(&store, "embed.pos_template");

    set(&mut store, "embed.proj.w", Tensor::zeros(&[8, 48]));
    set(&mut store, "embed.proj.b", Tensor::full(&[8], 0.75));
    let image = randn(&mut r, &[8, 8, 3], 1.0);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let z = embed.forward(&mut ctx, &image, Role::Template).unwrap();
    let want = pos.map(|v| v + 0.75);
    assert!(ctx.value(z).max_abs_diff(&want).unwrap() < 1e-15);
    drop(ctx);

    // a constant-1 patch projects to the row sums of W_p plus b_p
    let w = randn(&mut r, &[8, 48], 1.0);
    let b = randn(&mut r, &[8], 1.0);
    set(&mut store, "embed.proj.w", w.clone());
    set(&mut store, "embed.proj.b", b.clone());
    set(&mut store, "embed.pos_template", Tensor::zeros(&[4, 8]));
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let z = embed.forward(&mut ctx, &Tensor::full(&[8, 8, 3], 1.0), Role::Template).unwrap();
    for tok in 0..4 {
        for o in 0..8 {
            let want: f64 = (0..48).map(|i| w.at2(o, i)).sum::<f64>() + b.data()[o];
            assert!((ctx.value(z).at2(tok, o) - want).abs() < 1e-12);
        }
    }
}

fn run_backbone(store: &ParamStore<f64>, bb: &Backbone, z: &Tensor<f64>, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut ctx = Ctx::new(store, Mode::Eval);
    let taps = bb.forward(&mut ctx, z, x).unwrap();
    taps.states.iter().map(|&s| ctx.value(s).clone()).collect()
}

#[test]
fn three_layers_three_taps_are_every_layer() {
    let cfg = small();
    let mut r = rng(6);
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &mut r, &cfg);
    randomize(&mut store, &mut r, 0.3);
    let z = randn(&mut r, &[8, 8, 3], 1.0);
    let x = randn(&mut r, &[12, 12, 3], 1.0);
    let taps = run_backbone(&store, &bb, &z, &x);
    assert_eq!(taps.len(), 3);

    let mut ctx = Ctx::new(&store, Mode::Eval);
    let ez = bb.embed.forward(&mut ctx, &z, Role::Template).unwrap();
    let ex = bb.embed.forward(&mut ctx, &x, Role::Search).unwrap();
    let mut h = ctx.tape.concat(&[ez, ex], 0).unwrap();
    for (i, block) in bb.blocks.iter().enumerate() {
        h = block.forward(&mut ctx, h).unwrap();
        assert_eq!(ctx.value(h), &taps[i], "layer {i}");
        assert_eq!(taps[i].shape(), &[13, 8]);
    }
}

#[test]
fn zero_residual_branches_tap_the_embedding() {
    let cfg = small();
    let mut r = rng(7);
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &mut r, &cfg);
    randomize(&mut store, &mut r, 0.3);
    let names: Vec<String> = store
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|n| n.starts_with("blocks.") && (n.contains(".proj.") || n.contains(".fc2.")))
        .collect();
    for n in names {
        let shape = get(&store, &n).shape().to_vec();
        set(&mut store, &n, Tensor::zeros(&shape));
    }
    let z = randn(&mut r, &[8, 8, 3], 1.0);
    let x = randn(&mut r, &[12, 12, 3], 1.0);
    let taps = run_backbone(&store, &bb, &z, &x);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let ez = bb.embed.forward(&mut ctx, &z, Role::Template).unwrap();
    let ex = bb.embed.forward(&mut ctx, &x, Role::Search).unwrap();
    let e = ctx.tape.concat(&[ez, ex], 0).unwrap();
    for t in &taps {
        assert_eq!(t, ctx.value(e));
    }
}

#[test]
fn identical_crops_differ_only_through_positions() {
    let cfg = TrackerConfig {
        search_size: 8,
        ssd_state_count: 2,
        ..small()
    };
    let mut r = rng(8);
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &mut r, &cfg);
    randomize(&mut store, &mut r, 0.3);
    let image = randn(&mut r, &[8, 8, 3], 1.0);
    let shared = get(&store, "embed.pos_template");
    set(&mut store, "embed.pos_search", shared);
    let taps = run_backbone(&store, &bb, &image, &image);
    let last = taps.last().unwrap();
    let zpart = last.narrow(0, 0, 4).unwrap();
    let xpart = last.narrow(0, 4, 4).unwrap();
    assert!(zpart.max_abs_diff(&xpart).unwrap() < 1e-12);
}

#[test]
fn swapping_search_patches_and_positions_swaps_tokens() {
    let cfg = small();
    let mut r = rng(9);
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &mut r, &cfg);
    randomize(&mut store, &mut r, 0.3);
    let z = randn(&mut r, &[8, 8, 3], 1.0);
    let x = randn(&mut r, &[12, 12, 3], 1.0);
    let before = run_backbone(&store, &bb, &z, &x);

    // search patches 1 (row 0, col 1) and 5 (row 1, col 2) of the 3×3 grid
    let (a, b) = (1usize, 5usize);
    let origin = |i: usize| ((i / 3) * 4, (i % 3) * 4);
    let mut swapped = x.clone();
    for dy in 0..4 {
        for dx in 0..4 {
            for c in 0..3 {
                let (ay, ax) = origin(a);
                let (by, bx) = origin(b);
                let ia = ((ay + dy) * 12 + ax + dx) * 3 + c;
                let ib = ((by + dy) * 12 + bx + dx) * 3 + c;
                swapped.data_mut().swap(ia, ib);
            }
        }
    }
    let mut pos = get(&store, "embed.pos_search");
    for c in 0..8 {
        pos.data_mut().swap(a * 8 + c, b * 8 + c);
    }
    set(&mut store, "embed.pos_search", pos);
    let after = run_backbone(&store, &bb, &z, &swapped);

    let m = 4;
    for (t0, t1) in before.iter().zip(&after) {
        for row in 0..13 {
            let src = match row {
                r if r == m + a => m + b,
                r if r == m + b => m + a,
                r => r,
            };
            for c in 0..8 {
                assert!((t1.at2(row, c) - t0.at2(src, c)).abs() < 1e-10, "row {row}");
            }
        }
    }
}

#[test]
fn full_size_taps_are_320_by_192() {
    let cfg = TrackerConfig::vit_tiny();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &mut rng(10), &cfg);
    let z = Tensor::full(&[128, 128, 3], 0.1);
    let x = Tensor::full(&[256, 256, 3], -0.2);
    let taps = run_backbone(&store, &bb, &z, &x);
    assert_eq!(taps.len(), 3);
    for t in taps {
        assert_eq!(t.shape(), &[320, 192]);
    }
}
