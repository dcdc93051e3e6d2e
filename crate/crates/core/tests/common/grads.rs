//! Finite-difference cases shared by the gradient tests and the acceptance run.

use super::{grad_check, param_grad_check, uniform};
use mudiff::diffusion::{gaussian, v_target};
use mudiff::nn::{Graph, ParamStore, Tensor, Var};
use mudiff::unet::{Context, UNet, UNetConfig};
use mudiff::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f32 = 1e-2;
pub const OP_TOL: f64 = 1e-3;
pub const NET_TOL: f64 = 1e-2;

fn inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| uniform(s, 1.0, &mut r)).collect()
}

type Case = (&'static str, f64);

fn check(
    out: &mut Vec<Case>,
    name: &'static str,
    shapes: &[&[usize]],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) {
    out.push((
        name,
        grad_check(f, &inputs(shapes, name.len() as u64), EPS, 48, 7),
    ));
}

pub fn elementwise_ops() -> Vec<Case> {
    let mut out = Vec::new();
    check(&mut out, "add", &[&[2, 3, 4], &[2, 3, 4]], |g, v| {
        g.add(v[0], v[1])
    });
    check(&mut out, "sub", &[&[2, 3, 4], &[2, 3, 4]], |g, v| {
        g.sub(v[0], v[1])
    });
    check(&mut out, "mul", &[&[2, 3, 4], &[2, 3, 4]], |g, v| {
        g.mul(v[0], v[1])
    });
    check(
        &mut out,
        "scale",
        &[&[3, 5]],
        |g, v| Ok(g.scale(v[0], -1.7)),
    );
    check(&mut out, "silu", &[&[4, 6]], |g, v| Ok(g.silu(v[0])));
    check(&mut out, "tanh", &[&[4, 6]], |g, v| Ok(g.tanh(v[0])));
    out
}

pub fn reductions_and_losses() -> Vec<Case> {
    let mut out = Vec::new();
    check(&mut out, "sum", &[&[3, 4]], |g, v| Ok(g.sum(v[0])));
    check(&mut out, "mean", &[&[3, 4]], |g, v| Ok(g.mean(v[0])));
    check(&mut out, "mse", &[&[2, 2, 5], &[2, 2, 5]], |g, v| {
        g.mse(v[0], v[1])
    });
    out
}

pub fn layout_ops() -> Vec<Case> {
    let mut out = Vec::new();
    check(&mut out, "reshape", &[&[2, 3, 4]], |g, v| {
        g.reshape(v[0], &[2, 12, 1])
    });
    check(&mut out, "transpose", &[&[2, 3, 5]], |g, v| {
        g.transpose12(v[0])
    });
    check(&mut out, "concat1", &[&[2, 3, 4], &[2, 2, 4]], |g, v| {
        g.concat(&[v[0], v[1]], 1)
    });
    check(&mut out, "concat2", &[&[2, 3, 4], &[2, 3, 2]], |g, v| {
        g.concat(&[v[0], v[1]], 2)
    });
    check(&mut out, "repeat", &[&[2, 3, 4]], |g, v| {
        g.repeat_time(v[0], 3)
    });
    out
}

pub fn convolutions() -> Vec<Case> {
    let mut out = Vec::new();
    check(
        &mut out,
        "conv_same",
        &[&[2, 3, 8], &[4, 3, 3], &[4]],
        |g, v| g.conv1d(v[0], v[1], Some(v[2]), 1, 1),
    );
    check(
        &mut out,
        "conv_strided",
        &[&[2, 3, 8], &[2, 3, 5], &[2]],
        |g, v| g.conv1d(v[0], v[1], Some(v[2]), 2, 2),
    );
    check(
        &mut out,
        "conv_pointwise",
        &[&[1, 5, 6], &[3, 5, 1]],
        |g, v| g.conv1d(v[0], v[1], None, 1, 0),
    );
    out
}

pub fn linear_map() -> Vec<Case> {
    let mut out = Vec::new();
    check(&mut out, "linear", &[&[2, 3, 5], &[5, 4], &[4]], |g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    });
    check(&mut out, "linear_nobias", &[&[2, 1, 6], &[6, 8]], |g, v| {
        g.linear(v[0], v[1], None)
    });
    out
}

pub fn normalisation_and_modulation() -> Vec<Case> {
    let mut out = Vec::new();
    check(&mut out, "group_norm", &[&[2, 4, 6], &[4], &[4]], |g, v| {
        let y = g.group_norm(v[0], 2, v[1], v[2], 1e-5)?;
        let w = g.constant(Tensor::from_fn(vec![2, 4, 6], |i| (i as f32 * 0.7).cos()));
        g.mul(y, w)
    });
    check(&mut out, "modulate", &[&[2, 3, 5], &[2, 1, 6]], |g, v| {
        g.modulate(v[0], v[1])
    });
    check(
        &mut out,
        "modulate_map",
        &[&[2, 3, 5], &[2, 1, 4], &[4, 6], &[6]],
        |g, v| {
            let ss = g.linear(v[1], v[2], Some(v[3]))?;
            g.modulate(v[0], ss)
        },
    );
    out
}

pub fn attention_paths() -> Vec<Case> {
    let mut out = Vec::new();
    check(
        &mut out,
        "self_attention",
        &[&[2, 4, 6], &[2, 4, 6], &[2, 4, 6]],
        |g, v| g.attention(v[0], v[1], v[2], 2, None, None),
    );
    check(
        &mut out,
        "cross_attention",
        &[&[2, 3, 4], &[2, 5, 4], &[2, 5, 4]],
        |g, v| g.attention(v[0], v[1], v[2], 1, None, None),
    );
    let mask = [true, false, true, false, false, false];
    check(
        &mut out,
        "masked_null",
        &[&[2, 3, 4], &[2, 3, 4], &[2, 3, 4], &[4], &[4]],
        |g, v| g.attention(v[0], v[1], v[2], 2, Some(&mask), Some((v[3], v[4]))),
    );
    out
}

fn grad_config() -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        channels: vec![4, 8],
        factors: vec![1, 2],
        item_repeats: vec![1, 1],
        use_attention: vec![false, true],
        use_cross_attention: vec![false, true],
        inject_depth: Some(1),
        inject_channels: 2,
        attention_heads: 2,
        attention_head_features: 4,
        context_features: 6,
        modulation_features: 8,
    }
}

/// Relative error of the tiny U-Net v-loss parameter gradients.
pub fn unet_v_loss() -> f64 {
    let config = grad_config();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let net = UNet::build_into(&config, &mut store, "", &mut rng).unwrap();
    // Move every parameter off its initial value so zero-initialised
    // branches carry gradient.
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let x0 = uniform(&[2, 1, 16], 0.5, &mut rng);
    let eps = gaussian(&[2, 1, 16], &mut rng);
    let sigmas = [0.3f32, 0.8];
    let mut noisy = Vec::new();
    let mut target = Vec::new();
    for (b, &s) in sigmas.iter().enumerate() {
        let s = s as f64;
        let c = mudiff::diffusion::coeffs(s).unwrap();
        for i in 0..16 {
            let (x, e) = (x0.data()[b * 16 + i] as f64, eps.data()[b * 16 + i] as f64);
            noisy.push((c.alpha * x + c.beta * e) as f32);
        }
        target.extend(
            v_target(
                &x0.data()[b * 16..(b + 1) * 16],
                &eps.data()[b * 16..(b + 1) * 16],
                s,
            )
            .unwrap(),
        );
    }
    let noisy = Tensor::new(vec![2, 1, 16], noisy).unwrap();
    let target = Tensor::new(vec![2, 1, 16], target).unwrap();
    let z = uniform(&[2, 2, 4], 1.0, &mut rng);
    let ctx = uniform(&[2, 3, 6], 1.0, &mut rng);
    let mask = [true, true, false, false, false, false];

    let loss = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let x = g.constant(noisy.clone());
        let zv = g.constant(z.clone());
        let tokens = g.constant(ctx.clone());
        let pred = net.forward(
            g,
            s,
            x,
            &sigmas,
            Some(zv),
            Some(Context {
                tokens,
                mask: &mask,
            }),
        )?;
        let t = g.constant(target.clone());
        g.mse(pred, t)
    };
    param_grad_check(loss, &mut store, 1e-2, 20, 22)
}

pub fn op_suite() -> Vec<Case> {
    [
        elementwise_ops(),
        reductions_and_losses(),
        layout_ops(),
        convolutions(),
        linear_map(),
        normalisation_and_modulation(),
        attention_paths(),
    ]
    .concat()
}
