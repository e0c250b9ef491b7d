//! Conditional noise-prediction network with hand-written backpropagation.
//!
//! The network `F` works on a preconditioned input and predicts a scaled
//! correction to a fixed skip path (variance-preserving form of the usual
//! `c_skip`/`c_out`/`c_in` preconditioning, with `s² = (1−ᾱ_t)/ᾱ_t`):
//!
//! ```text
//! u  = c_in·x/sqrt(ᾱ_t)                                  c_in  = 1/sqrt(s² + σ_d²)
//! a  = W_in·u + W_c·[time(t), prompt(c)] + b_in          h = tanh(a)
//! r  = h + W_r2·tanh(W_r1·h + b_r1) + b_r2
//! m  = W_m·tanh(V·prompt(c) + b_v)
//! F  = W_out·r + b_out + g_t·u
//! x̂0 = c_skip·x/sqrt(ᾱ_t) + κ_t·(1 − c_skip)·m + c_out·F   c_skip = σ_d²/(s² + σ_d²)
//! ε̂  = (x − sqrt(ᾱ_t)·x̂0) / sqrt(1 − ᾱ_t)               c_out  = s·σ_d/sqrt(s² + σ_d²)
//! ```
//!
//! With `κ_t = 1` and `F = 0`, `x̂0` is the posterior mean under a prior
//! `x0 ~ N(m(c), σ_d²)`: the prompt template `m` carries what the prompt
//! alone says about the image, the residual MLP what the noisy pixels add.
//! `c_out` shrinks with the noise level, so a unit change of `F` moves the
//! reverse-step mean by roughly one standard deviation at every step.

use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::dataset::normalize_prompt;
use crate::error::{Error, Result};
use crate::image::Shape;
use crate::rng::{derive_seed, fnv1a, normal, normal_vec, rng_from_seed};
use crate::scalar::{axpy, dot, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserArch {
    pub image_shape: Shape,
    pub hidden: usize,
    /// Width of the prompt-only template branch.
    pub template_hidden: usize,
    pub time_dim: usize,
    pub prompt_dim: usize,
    pub prompt_seed: u64,
    /// Number of diffusion steps; one skip gain per step.
    pub steps: usize,
    /// Assumed standard deviation of clean model-space pixels.
    pub sigma_data: f64,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            image_shape: (32, 32, 3),
            hidden: 8,
            template_hidden: 14,
            time_dim: 8,
            prompt_dim: 16,
            prompt_seed: 0,
            steps: 50,
            sigma_data: 0.15,
        }
    }
}

/// Offsets of each tensor in the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w_in: usize,
    w_c: usize,
    b_in: usize,
    w_r1: usize,
    b_r1: usize,
    w_r2: usize,
    b_r2: usize,
    w_out: usize,
    b_out: usize,
    gain: usize,
    w_v: usize,
    b_v: usize,
    w_m: usize,
    kappa: usize,
    total: usize,
}

impl DenoiserArch {
    pub fn pixels(&self) -> usize {
        self.image_shape.0 * self.image_shape.1 * self.image_shape.2
    }

    pub fn cond_dim(&self) -> usize {
        self.time_dim + self.prompt_dim
    }

    fn layout(&self) -> Layout {
        let (d, h, c) = (self.pixels(), self.hidden, self.cond_dim());
        let w_in = 0;
        let w_c = w_in + h * d;
        let b_in = w_c + h * c;
        let w_r1 = b_in + h;
        let b_r1 = w_r1 + h * h;
        let w_r2 = b_r1 + h;
        let b_r2 = w_r2 + h * h;
        let w_out = b_r2 + h;
        let b_out = w_out + d * h;
        let gain = b_out + d;
        let k = self.template_hidden;
        let w_v = gain + self.steps;
        let b_v = w_v + k * self.prompt_dim;
        let w_m = b_v + k;
        let kappa = w_m + d * k;
        Layout {
            w_in,
            w_c,
            b_in,
            w_r1,
            b_r1,
            w_r2,
            b_r2,
            w_out,
            b_out,
            gain,
            w_v,
            b_v,
            w_m,
            kappa,
            total: kappa + self.steps,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Offset of the output bias `b_out` in the flat parameter vector.
    #[cfg(test)]
    pub(crate) fn output_bias_offset(&self) -> usize {
        self.layout().b_out
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels() == 0 || self.hidden == 0 || self.template_hidden == 0 || self.steps == 0 {
            return Err(Error::invalid("denoiser dimensions must be positive"));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::invalid("sigma_data must be positive"));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid("time embedding dimension must be even"));
        }
        Ok(())
    }

    /// Sinusoidal embedding of timestep `t`.
    pub fn time_embedding<T: Scalar>(&self, t: usize) -> Vec<T> {
        let half = self.time_dim / 2;
        let mut out = Vec::with_capacity(self.time_dim);
        for k in 0..half {
            let freq = (self.steps as f64).powf(-(k as f64) / half.max(1) as f64);
            let ang = t as f64 * freq;
            out.push(T::lit(ang.sin()));
            out.push(T::lit(ang.cos()));
        }
        out
    }

    /// Fixed prompt vector: standard normal entries seeded by the hash of the
    /// normalized prompt.
    pub fn prompt_embedding<T: Scalar>(&self, prompt: &str) -> Vec<T> {
        let seed = derive_seed(self.prompt_seed, fnv1a(&normalize_prompt(prompt)));
        normal_vec(&mut rng_from_seed(seed), self.prompt_dim)
    }

    /// Concatenated time and prompt conditioning.
    pub fn conditioning<T: Scalar>(&self, t: usize, prompt_embedding: &[T]) -> Vec<T> {
        let mut c = self.time_embedding(t);
        c.extend_from_slice(prompt_embedding);
        c
    }
}

/// Parameters θ plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    arch: DenoiserArch,
    params: Vec<T>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub t: usize,
    pub eps: Vec<T>,
    /// Preconditioned input `u`.
    x: Vec<T>,
    cond: Vec<T>,
    h: Vec<T>,
    u: Vec<T>,
    r: Vec<T>,
    /// Template branch activations and output.
    hm: Vec<T>,
    m: Vec<T>,
    /// `(1 − c_skip)/c_out`, the template's weight inside `F` before `κ_t`.
    q: T,
    /// `∂ε̂/∂F`
    eps_per_o: T,
}

fn matvec<T: Scalar>(w: &[T], x: &[T], out: &mut [T]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(x.len())) {
        *o += dot(row, x);
    }
}

impl<T: Scalar> Denoiser<T> {
    /// Random initialization: fan-in scaled Gaussian weights, output bias at
    /// zero, skip gains at zero, template weights `κ_t` at one.
    pub fn new(arch: DenoiserArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let l = arch.layout();
        let (d, h, c) = (arch.pixels(), arch.hidden, arch.cond_dim());
        let mut rng = rng_from_seed(seed);
        let mut params = vec![T::zero(); l.total];
        let mut fill = |range: std::ops::Range<usize>, std: f64, rng: &mut crate::rng::StdRng| {
            let s = T::lit(std);
            for p in &mut params[range] {
                *p = normal::<T, _>(rng) * s;
            }
        };
        fill(l.w_in..l.w_c, 1.0 / (d as f64).sqrt(), &mut rng);
        fill(l.w_c..l.b_in, 1.0 / (c.max(1) as f64).sqrt(), &mut rng);
        fill(l.w_r1..l.b_r1, 1.0 / (h as f64).sqrt(), &mut rng);
        fill(l.w_r2..l.b_r2, 0.5 / (h as f64).sqrt(), &mut rng);
        fill(l.w_out..l.b_out, 0.1 / (h as f64).sqrt(), &mut rng);
        let k = arch.template_hidden;
        fill(l.w_v..l.b_v, 1.0 / (arch.prompt_dim.max(1) as f64).sqrt(), &mut rng);
        fill(l.w_m..l.kappa, 0.1 / (k as f64).sqrt(), &mut rng);
        params[l.kappa..].iter_mut().for_each(|p| *p = T::one());
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: DenoiserArch, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Dimension {
                left: arch.param_count(),
                right: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn check_schedule(&self, schedule: &NoiseSchedule<T>) -> Result<()> {
        if schedule.steps() != self.arch.steps {
            return Err(Error::Incompatible(format!(
                "schedule has {} steps, denoiser was built for {}",
                schedule.steps(),
                self.arch.steps
            )));
        }
        Ok(())
    }

    pub fn prompt_embedding(&self, prompt: &str) -> Vec<T> {
        self.arch.prompt_embedding(prompt)
    }

    /// Predicted noise with everything needed for [`Denoiser::backward`].
    pub fn forward(
        &self,
        schedule: &NoiseSchedule<T>,
        x: &[T],
        t: usize,
        prompt_embedding: &[T],
    ) -> Result<Forward<T>> {
        schedule.check_step(t)?;
        self.check_schedule(schedule)?;
        let d = self.arch.pixels();
        if x.len() != d {
            return Err(Error::Dimension {
                left: d,
                right: x.len(),
            });
        }
        if prompt_embedding.len() != self.arch.prompt_dim {
            return Err(Error::Dimension {
                left: self.arch.prompt_dim,
                right: prompt_embedding.len(),
            });
        }
        let l = self.arch.layout();
        let hdim = self.arch.hidden;
        let p = &self.params;
        let cond = self.arch.conditioning(t, prompt_embedding);
        let ab = schedule.alpha_bar(t);
        let sab = ab.sqrt();
        let s2 = (T::one() - ab) / ab;
        let sd = T::lit(self.arch.sigma_data);
        let norm = (s2 + sd * sd).sqrt();
        let c_skip = sd * sd / (norm * norm);
        let c_out = s2.sqrt() * sd / norm;
        let xin: Vec<T> = x.iter().map(|&v| v / (sab * norm)).collect();

        let mut a = p[l.b_in..l.w_r1].to_vec();
        matvec(&p[l.w_in..l.w_c], &xin, &mut a);
        matvec(&p[l.w_c..l.b_in], &cond, &mut a);
        let h: Vec<T> = a.iter().map(|v| v.tanh()).collect();

        let mut a2 = p[l.b_r1..l.w_r2].to_vec();
        matvec(&p[l.w_r1..l.b_r1], &h, &mut a2);
        let u: Vec<T> = a2.iter().map(|v| v.tanh()).collect();
        let mut r = p[l.b_r2..l.w_out].to_vec();
        matvec(&p[l.w_r2..l.b_r2], &u, &mut r);
        for (ri, &hi) in r.iter_mut().zip(&h) {
            *ri += hi;
        }
        debug_assert_eq!(r.len(), hdim);

        let mut o = p[l.b_out..l.gain].to_vec();
        matvec(&p[l.w_out..l.b_out], &r, &mut o);
        axpy(p[l.gain + t - 1], &xin, &mut o);

        let mut am = p[l.b_v..l.w_m].to_vec();
        matvec(&p[l.w_v..l.b_v], prompt_embedding, &mut am);
        let hm: Vec<T> = am.iter().map(|v| v.tanh()).collect();
        let mut m = vec![T::zero(); d];
        matvec(&p[l.w_m..l.kappa], &hm, &mut m);
        let q = (T::one() - c_skip) / c_out;
        axpy(p[l.kappa + t - 1] * q, &m, &mut o);

        let inv = T::one() / (T::one() - ab).sqrt();
        let eps_per_o = -sab * c_out * inv;
        let skip = (T::one() - c_skip) * inv;
        let eps = x.iter().zip(&o).map(|(&xi, &oi)| xi * skip + eps_per_o * oi).collect();
        Ok(Forward {
            t,
            eps,
            x: xin,
            cond,
            h,
            u,
            r,
            hm,
            m,
            q,
            eps_per_o,
        })
    }

    pub fn predict_noise(&self, schedule: &NoiseSchedule<T>, x: &[T], t: usize, prompt: &str) -> Result<Vec<T>> {
        Ok(self.forward(schedule, x, t, &self.prompt_embedding(prompt))?.eps)
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂ε̂`.
    pub fn backward(&self, fwd: &Forward<T>, d_eps: &[T], grad: &mut [T]) {
        let l = self.arch.layout();
        let (d, hdim) = (self.arch.pixels(), self.arch.hidden);
        let p = &self.params;
        debug_assert_eq!(d_eps.len(), d);
        debug_assert_eq!(grad.len(), l.total);

        let d_o: Vec<T> = d_eps.iter().map(|&g| g * fwd.eps_per_o).collect();
        grad[l.gain + fwd.t - 1] += dot(&d_o, &fwd.x);
        for (g, &v) in grad[l.b_out..l.gain].iter_mut().zip(&d_o) {
            *g += v;
        }
        // template branch
        {
            let kt = p[l.kappa + fwd.t - 1];
            grad[l.kappa + fwd.t - 1] += fwd.q * dot(&d_o, &fwd.m);
            let k = self.arch.template_hidden;
            let scale = kt * fwd.q;
            let mut d_hm = vec![T::zero(); k];
            let w_m = &p[l.w_m..l.kappa];
            let g_m = &mut grad[l.w_m..l.kappa];
            for (i, &dok) in d_o.iter().enumerate() {
                if dok == T::zero() {
                    continue;
                }
                let dm = dok * scale;
                axpy(dm, &w_m[i * k..(i + 1) * k], &mut d_hm);
                axpy(dm, &fwd.hm, &mut g_m[i * k..(i + 1) * k]);
            }
            let pe = &fwd.cond[self.arch.time_dim..];
            let pd = pe.len();
            for (i, (&g, &h)) in d_hm.iter().zip(&fwd.hm).enumerate() {
                let da = g * (T::one() - h * h);
                grad[l.b_v + i] += da;
                axpy(da, pe, &mut grad[l.w_v + i * pd..l.w_v + (i + 1) * pd]);
            }
        }
        let mut d_r = vec![T::zero(); hdim];
        {
            let w_out = &p[l.w_out..l.b_out];
            let g_out = &mut grad[l.w_out..l.b_out];
            for (k, &dok) in d_o.iter().enumerate() {
                if dok == T::zero() {
                    continue;
                }
                let row = &w_out[k * hdim..(k + 1) * hdim];
                axpy(dok, row, &mut d_r);
                axpy(dok, &fwd.r, &mut g_out[k * hdim..(k + 1) * hdim]);
            }
        }
        // residual branch
        for (g, &v) in grad[l.b_r2..l.w_out].iter_mut().zip(&d_r) {
            *g += v;
        }
        let mut d_u = vec![T::zero(); hdim];
        for (i, &dri) in d_r.iter().enumerate() {
            axpy(dri, &fwd.u, &mut grad[l.w_r2 + i * hdim..l.w_r2 + (i + 1) * hdim]);
            axpy(dri, &p[l.w_r2 + i * hdim..l.w_r2 + (i + 1) * hdim], &mut d_u);
        }
        let d_a2: Vec<T> = d_u.iter().zip(&fwd.u).map(|(&g, &u)| g * (T::one() - u * u)).collect();
        for (g, &v) in grad[l.b_r1..l.w_r2].iter_mut().zip(&d_a2) {
            *g += v;
        }
        let mut d_h = d_r;
        for (i, &dai) in d_a2.iter().enumerate() {
            axpy(dai, &fwd.h, &mut grad[l.w_r1 + i * hdim..l.w_r1 + (i + 1) * hdim]);
            axpy(dai, &p[l.w_r1 + i * hdim..l.w_r1 + (i + 1) * hdim], &mut d_h);
        }
        let d_a: Vec<T> = d_h.iter().zip(&fwd.h).map(|(&g, &h)| g * (T::one() - h * h)).collect();
        for (g, &v) in grad[l.b_in..l.w_r1].iter_mut().zip(&d_a) {
            *g += v;
        }
        let c = fwd.cond.len();
        for (i, &dai) in d_a.iter().enumerate() {
            axpy(dai, &fwd.x, &mut grad[l.w_in + i * d..l.w_in + (i + 1) * d]);
            axpy(dai, &fwd.cond, &mut grad[l.w_c + i * c..l.w_c + (i + 1) * c]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;

    fn tiny() -> (Denoiser<f64>, NoiseSchedule<f64>) {
        let arch = DenoiserArch {
            image_shape: (2, 2, 3),
            hidden: 5,
            template_hidden: 3,
            time_dim: 4,
            prompt_dim: 16,
            prompt_seed: 3,
            steps: 6,
            sigma_data: 0.5,
        };
        let mut m = Denoiser::new(arch, 1).unwrap();
        // exercise every parameter, including output bias and gains
        let mut rng = rng_from_seed(99);
        for p in m.params_mut() {
            *p += normal::<f64, _>(&mut rng) * 0.1;
        }
        (m, make_schedule(6, 0.01, 0.2).unwrap())
    }

    #[test]
    fn default_arch_is_desk_scale() {
        let arch = DenoiserArch::default();
        assert!(arch.param_count() <= 100_000, "{}", arch.param_count());
    }

    #[test]
    fn prompt_embedding_is_stable() {
        let arch = DenoiserArch::default();
        let a: Vec<f64> = arch.prompt_embedding("Starry  Night");
        let b: Vec<f64> = arch.prompt_embedding("starry night");
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert_ne!(a, arch.prompt_embedding::<f64>("sunflowers"));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (m, s) = tiny();
        let mut rng = rng_from_seed(5);
        let x: Vec<f64> = normal_vec(&mut rng, 12);
        let w: Vec<f64> = normal_vec(&mut rng, 12);
        let pe = m.prompt_embedding("a prompt");
        let t = 3;
        let loss = |m: &Denoiser<f64>| dot(&m.forward(&s, &x, t, &pe).unwrap().eps, &w);
        let fwd = m.forward(&s, &x, t, &pe).unwrap();
        let mut grad = vec![0.0; m.param_count()];
        m.backward(&fwd, &w, &mut grad);
        let h = 1e-6;
        for i in 0..m.param_count() {
            let mut a = m.clone();
            a.params_mut()[i] += h;
            let mut b = m.clone();
            b.params_mut()[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            let tol = 1e-6 * (1.0 + fd.abs());
            assert!((fd - grad[i]).abs() < tol, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn zero_network_predicts_skip_path() {
        let (mut m, s) = tiny();
        m.params_mut().iter_mut().for_each(|p| *p = 0.0);
        // W_m = 0 leaves the template at zero whatever κ_t is
        let x = vec![0.3; 12];
        let eps = m.predict_noise(&s, &x, 2, "p").unwrap();
        let ab = s.alpha_bar(2);
        let s2 = (1.0 - ab) / ab;
        let c_skip = 0.25 / (s2 + 0.25);
        let expected = 0.3 * (1.0 - c_skip) / (1.0 - ab).sqrt();
        assert!(eps.iter().all(|&e| (e - expected).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (m, s) = tiny();
        let pe = m.prompt_embedding("p");
        assert!(m.forward(&s, &[0.0; 11], 1, &pe).is_err());
        assert!(m.forward(&s, &[0.0; 12], 7, &pe).is_err());
        let other = make_schedule::<f64>(5, 0.01, 0.2).unwrap();
        assert!(matches!(
            m.forward(&other, &[0.0; 12], 1, &pe),
            Err(Error::Incompatible(_))
        ));
    }
}
