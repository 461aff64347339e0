//! Differentiable end-to-end link: selection, power control, fading, noise,
//! equalization and zero-filled reassembly on the autodiff graph.

use num_complex::Complex64;

use crate::autodiff::{Graph, Tensor, Var};
use crate::channel::{check_fade, noise_from, rician_from, DEEP_FADE_FLOOR};
use crate::error::{Error, Result};
use crate::fir::{select_full, SelectionPattern, SensitivityModel};
use crate::model::{Bound, Pipeline};
use crate::rng::SimRng;

/// Channel draws for a batch: fading coefficients (one shared, or one per
/// row) and noise for the `B` transmitted symbols of every row.
#[derive(Clone, Debug)]
pub struct LinkDraw {
    pub h: Vec<Complex64>,
    /// `[rows × 2B]`, interleaved like the features.
    pub noise: Tensor,
    /// Deep fades that forced a redraw of `h`.
    pub deep_fades: usize,
}

/// Rician draw, redrawn while `|h|` is below the deep-fade floor.
pub(crate) fn draw_h(rng: &mut SimRng, rician_factor: f64, deep_fades: &mut usize) -> Complex64 {
    loop {
        let h = rician_from(rng, rician_factor);
        if h.norm() > DEEP_FADE_FLOOR {
            return h;
        }
        *deep_fades += 1;
    }
}

fn interleave(noise: &[Complex64]) -> impl Iterator<Item = f64> + '_ {
    noise.iter().flat_map(|n| [n.re, n.im])
}

impl LinkDraw {
    /// Block fading over the whole batch: one `h`, fresh noise per symbol.
    pub fn block(
        rng: &mut SimRng,
        rows: usize,
        budget: usize,
        rician_factor: f64,
        sigma2: f64,
    ) -> Self {
        let mut deep_fades = 0;
        let h = draw_h(rng, rician_factor, &mut deep_fades);
        let noise = noise_from(rng, rows * budget, sigma2);
        LinkDraw {
            h: vec![h],
            noise: Tensor::new(vec![rows, 2 * budget], interleave(&noise).collect())
                .expect("sized"),
            deep_fades,
        }
    }

    /// `h = 1`, no noise.
    pub fn noiseless(rows: usize, budget: usize) -> Self {
        LinkDraw {
            h: vec![Complex64::new(1.0, 0.0)],
            noise: Tensor::zeros(&[rows, 2 * budget]),
            deep_fades: 0,
        }
    }
}

/// `f` `[rows × 2L]` through the link, returning the equalized symbols
/// scattered back into a zero-filled `[rows × 2L]` matrix.
pub fn forward_link(
    g: &mut Graph,
    f: Var,
    pattern: &SelectionPattern,
    draw: &LinkDraw,
    avg_power: f64,
) -> Result<Var> {
    let width = g.value(f).cols();
    let rows = g.value(f).rows();
    let budget = pattern.len();
    if budget == 0 {
        return Err(Error::contract("cannot transmit an empty selection"));
    }
    if draw.noise.rows() != rows || draw.noise.cols() != 2 * budget {
        return Err(Error::Shape {
            op: "forward_link",
            lhs: vec![rows, 2 * budget],
            rhs: draw.noise.shape().to_vec(),
        });
    }
    for &h in &draw.h {
        check_fade(h)?;
    }
    let cols = pattern.real_columns();
    let z_tilde = g.gather_cols(f, &cols)?;
    let z = g.power_normalize(z_tilde, (avg_power * budget as f64).sqrt())?;
    let faded = g.complex_scale(z, &draw.h)?;
    let noise = g.leaf(draw.noise.clone());
    let received = g.add(faded, noise)?;
    let inv: Vec<Complex64> = draw.h.iter().map(|h| h.inv()).collect();
    let z_eq = g.complex_scale(received, &inv)?;
    g.scatter_cols(z_eq, &cols, width)
}

pub struct PipelineOutputs {
    pub e: Var,
    pub f: Var,
    pub e_hat: Var,
    pub probs: Vec<Var>,
}

/// Full transmitter-channel-receiver pass for one pipeline.
pub fn run_pipeline(
    g: &mut Graph,
    pipeline: &Pipeline,
    bound: &Bound,
    x: Var,
    pattern: &SelectionPattern,
    draw: &LinkDraw,
    avg_power: f64,
) -> Result<PipelineOutputs> {
    let e = pipeline.semantic_encode(g, bound, x)?;
    let f = pipeline.jsc_encode(g, bound, e)?;
    let z_eq = forward_link(g, f, pattern, draw, avg_power)?;
    let e_hat = pipeline.jsc_decode(g, bound, z_eq)?;
    let probs = pipeline.task_heads(g, bound, e_hat)?;
    Ok(PipelineOutputs { e, f, e_hat, probs })
}

/// A pipeline seen through a noiseless, complete-transmission link, used to
/// differentiate task probabilities w.r.t. `f`.
pub struct NoiselessLink<'a> {
    pub pipeline: &'a Pipeline,
    pub avg_power: f64,
}

impl SensitivityModel for NoiselessLink<'_> {
    fn channel_features(&self, x: &Tensor) -> Result<Tensor> {
        self.pipeline.encode_to_channel(x)
    }

    fn task_probabilities(&self, g: &mut Graph, f: Var, task: usize) -> Result<Var> {
        let bound = self.pipeline.bind(g);
        let rows = g.value(f).rows();
        let len = self.pipeline.channel_len();
        let z_eq = forward_link(
            g,
            f,
            &select_full(len),
            &LinkDraw::noiseless(rows, len),
            self.avg_power,
        )?;
        let e_hat = self.pipeline.jsc_decode(g, &bound, z_eq)?;
        self.pipeline.task_head(g, &bound, e_hat, task)
    }

    fn params_finite(&self) -> bool {
        self.pipeline.params.all_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{equalize, power_normalize, transmit, ChannelRealization};
    use crate::fir::{apply_selection, scatter_received, select_top_b, ImportanceVector};
    use crate::rng::rng_from;

    fn to_complex(row: &[f64]) -> Vec<Complex64> {
        row.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect()
    }

    #[test]
    fn graph_link_matches_complex_reference() {
        let len = 6;
        let f_row: Vec<f64> = (0..2 * len).map(|i| (i as f64 * 0.37).sin()).collect();
        let s = ImportanceVector {
            values: vec![0.2, 0.9, 0.1, 0.5, 0.7, 0.0],
            task_weights: vec![1.0],
        };
        let pattern = select_top_b(&s, 3).unwrap();
        let mut rng = rng_from(17, &[]);
        let draw = LinkDraw::block(&mut rng, 1, 3, 2.0, 0.4);

        let mut g = Graph::new();
        let f = g.leaf(Tensor::new(vec![1, 2 * len], f_row.clone()).unwrap());
        let out = forward_link(&mut g, f, &pattern, &draw, 1.0).unwrap();
        let got = to_complex(g.value(out).data());

        let fc = to_complex(&f_row);
        let z = power_normalize(&apply_selection(&fc, &pattern).unwrap(), 1.0).unwrap();
        let real = ChannelRealization {
            h: draw.h[0],
            noise: to_complex(draw.noise.row(0)),
            seed: 0,
        };
        let z_eq = equalize(&transmit(&z, &real).unwrap(), real.h).unwrap();
        let want = scatter_received(&z_eq, &pattern, len).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).norm() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn noiseless_full_link_only_rescales() {
        let mut g = Graph::new();
        let f = g.leaf(Tensor::from_rows(&[vec![3.0, 4.0, 0.0, 0.0]]).unwrap());
        let out =
            forward_link(&mut g, f, &select_full(2), &LinkDraw::noiseless(1, 2), 1.0).unwrap();
        // ‖f‖ = 5 scaled to sqrt(2)
        let scale = 2f64.sqrt() / 5.0;
        let v = g.value(out).data();
        assert!((v[0] - 3.0 * scale).abs() < 1e-15 && (v[1] - 4.0 * scale).abs() < 1e-15);
    }
}
