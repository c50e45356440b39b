//! Shared-encoder agent network.
//!
//! The encoder `phi` feeds a policy head and a value head, both of which also
//! see a memory vector (the representation of the last unlocked achievement,
//! zero at episode start). Achievement representations `nu` are unit
//! differences of consecutive latents; state-action representations `psi`
//! pass an action-modulated latent and the memory through a projection MLP.
//!
//! Architecture and parameters are kept apart: [`AgentNet`] only knows the
//! layout, so the same forward code runs on the live [`ParamStore`] and on
//! frozen snapshots of it.

use ndauto::{fan_in, orthogonal, Categorical, ConvGeom, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Differences shorter than this have no direction.
pub const DEGENERATE_EPS: Real = 1e-6;

const POLICY_GAIN: Real = 0.01;
const VALUE_GAIN: Real = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Channels of the 3x3 same-padded conv layers; empty for a pure MLP.
    pub conv_channels: Vec<usize>,
    /// Dense layer widths after flattening; the last one is the latent size.
    pub dense: Vec<usize>,
    pub film_hidden: usize,
    pub proj_hidden: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeProfile {
    /// Single hidden layer MLP; what the tests and desk-scale runs use.
    Tiny,
    /// Two small conv layers and a 256-wide latent.
    Desk,
    /// Wide channels `[64, 128, 128]` with dense 256 then 1024.
    Wide,
    /// The `[64, 64, 128]` channel variant of the wide network.
    WideAlt,
}

impl SizeProfile {
    pub fn config(self) -> NetConfig {
        let (conv_channels, dense, hidden) = match self {
            Self::Tiny => (vec![], vec![64], 64),
            Self::Desk => (vec![16, 32], vec![256], 256),
            Self::Wide => (vec![64, 128, 128], vec![256, 1024], 1024),
            Self::WideAlt => (vec![64, 64, 128], vec![256, 1024], 1024),
        };
        NetConfig {
            conv_channels,
            dense,
            film_hidden: hidden,
            proj_hidden: hidden,
        }
    }
}

impl NetConfig {
    pub fn latent(&self) -> usize {
        *self.dense.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = self
            .conv_channels
            .iter()
            .chain(&self.dense)
            .chain([&self.film_hidden, &self.proj_hidden]);
        if self.dense.is_empty() || sizes.into_iter().any(|&s| s == 0) {
            return Err(Error::Config(
                "network needs at least one dense layer and positive widths".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    norm: Norm,
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
}

struct Builder<'a, R> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn norm(&mut self, name: &str, n: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{name}.ln_gain"), Tensor::filled(&[1, n], 1.0)),
            bias: self.store.add(format!("{name}.ln_bias"), Tensor::zeros(&[1, n])),
        }
    }

    fn dense(&mut self, name: &str, w: Tensor) -> Dense {
        let n = w.cols();
        Dense {
            w: self.store.add(format!("{name}.w"), w),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[1, n])),
        }
    }

    fn fan_in(&mut self, name: &str, i: usize, o: usize) -> Dense {
        let w = fan_in(self.rng, i, o, 1.0);
        self.dense(name, w)
    }
}

/// Parameter layout and dimensions of the agent.
#[derive(Clone, Debug)]
pub struct AgentNet {
    config: NetConfig,
    obs_shape: (usize, usize, usize),
    num_actions: usize,
    convs: Vec<ConvLayer>,
    encoder: Vec<(Norm, Dense)>,
    policy: (Norm, Dense),
    value: (Norm, Dense),
    film_scale: [Dense; 2],
    film_shift: [Dense; 2],
    proj: [(Norm, Dense); 2],
}

/// Policy-head output for a batch.
pub struct HeadOutput<'g> {
    pub dist: Categorical<'g>,
    /// `[batch, 1]`, in normalized-target space.
    pub value: Var<'g>,
}

impl AgentNet {
    /// Builds the layout and a freshly initialized parameter store.
    pub fn new(
        config: NetConfig,
        obs_shape: (usize, usize, usize),
        num_actions: usize,
        rng: &mut impl Rng,
    ) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if num_actions == 0 || obs_shape.0 * obs_shape.1 * obs_shape.2 == 0 {
            return Err(Error::Config("empty observation or action space".into()));
        }
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng };
        let (c, h, w) = obs_shape;
        let mut convs = Vec::new();
        let mut channels = c;
        for (i, &out) in config.conv_channels.iter().enumerate() {
            let geom = ConvGeom {
                in_channels: channels,
                out_channels: out,
                height: h,
                width: w,
                kernel: 3,
            };
            let name = format!("encoder.conv{i}");
            let norm = b.norm(&name, geom.in_features());
            let d = b.fan_in(&name, geom.patch(), out);
            convs.push(ConvLayer {
                norm,
                w: d.w,
                b: d.b,
                geom,
            });
            channels = out;
        }
        let mut width = channels * h * w;
        let mut encoder = Vec::new();
        for (i, &out) in config.dense.iter().enumerate() {
            let name = format!("encoder.dense{i}");
            encoder.push((b.norm(&name, width), b.fan_in(&name, width, out)));
            width = out;
        }
        let latent = config.latent();
        let heads_in = 2 * latent;
        let policy = (b.norm("policy", heads_in), {
            let w = orthogonal(b.rng, heads_in, num_actions, POLICY_GAIN);
            b.dense("policy", w)
        });
        let value = (b.norm("value", heads_in), {
            let w = orthogonal(b.rng, heads_in, 1, VALUE_GAIN);
            b.dense("value", w)
        });
        // Zero output layers make the modulation start as the identity.
        let mut film = |name: &str| {
            [
                b.fan_in(&format!("{name}.0"), num_actions, config.film_hidden),
                b.dense(&format!("{name}.1"), Tensor::zeros(&[config.film_hidden, latent])),
            ]
        };
        let film_scale = film("film_scale");
        let film_shift = film("film_shift");
        let proj = [
            (
                b.norm("proj.0", heads_in),
                b.fan_in("proj.0", heads_in, config.proj_hidden),
            ),
            (
                b.norm("proj.1", config.proj_hidden),
                b.fan_in("proj.1", config.proj_hidden, latent),
            ),
        ];
        let net = Self {
            config,
            obs_shape,
            num_actions,
            convs,
            encoder,
            policy,
            value,
            film_scale,
            film_shift,
            proj,
        };
        Ok((net, store))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn latent_size(&self) -> usize {
        self.config.latent()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn obs_shape(&self) -> (usize, usize, usize) {
        self.obs_shape
    }

    pub fn obs_len(&self) -> usize {
        self.obs_shape.0 * self.obs_shape.1 * self.obs_shape.2
    }

    fn linear<'g>(&self, g: &'g Graph, p: &ParamStore, x: Var<'g>, d: Dense) -> Result<Var<'g>> {
        Ok(x.matmul(g.param(p, d.w))?.add_row(g.param(p, d.b))?)
    }

    fn normed<'g>(&self, g: &'g Graph, p: &ParamStore, x: Var<'g>, (n, d): (Norm, Dense)) -> Result<Var<'g>> {
        let x = x.layer_norm(g.param(p, n.gain), g.param(p, n.bias))?;
        self.linear(g, p, x, d)
    }

    /// `[batch, obs_len] -> [batch, latent]`.
    pub fn encode<'g>(&self, g: &'g Graph, p: &ParamStore, obs: Var<'g>) -> Result<Var<'g>> {
        if obs.cols() != self.obs_len() {
            return Err(Error::ObservationSize {
                expected: self.obs_len(),
                got: obs.cols(),
            });
        }
        let mut x = obs;
        for c in &self.convs {
            let y = x.layer_norm(g.param(p, c.norm.gain), g.param(p, c.norm.bias))?;
            x = y.conv2d(g.param(p, c.w), g.param(p, c.b), c.geom)?.relu();
        }
        for &layer in &self.encoder {
            x = self.normed(g, p, x, layer)?.relu();
        }
        Ok(x)
    }

    /// Policy and value from latents concatenated with memory vectors.
    pub fn heads<'g>(&self, g: &'g Graph, p: &ParamStore, latent: Var<'g>, memory: Var<'g>) -> Result<HeadOutput<'g>> {
        self.check_latent("memory", memory)?;
        let x = latent.concat_cols(memory)?;
        let logits = self.normed(g, p, x, self.policy)?;
        let value = self.normed(g, p, x, self.value)?;
        Ok(HeadOutput {
            dist: Categorical::new(logits)?,
            value,
        })
    }

    fn check_latent(&self, what: &str, v: Var<'_>) -> Result<()> {
        if v.cols() != self.latent_size() {
            return Err(Error::Graph(format!(
                "{what} has {} columns, latent size is {}",
                v.cols(),
                self.latent_size()
            )));
        }
        Ok(())
    }

    fn one_hot(&self, actions: &[usize]) -> Result<Tensor> {
        if let Some(&a) = actions.iter().find(|&&a| a >= self.num_actions) {
            return Err(Error::InvalidAction {
                action: a,
                num_actions: self.num_actions,
            });
        }
        Ok(Tensor::one_hot(actions, self.num_actions))
    }

    /// `(1 + scale(a)) * latent + shift(a)`.
    pub fn film<'g>(&self, g: &'g Graph, p: &ParamStore, latent: Var<'g>, actions: &[usize]) -> Result<Var<'g>> {
        self.check_latent("latent", latent)?;
        if actions.len() != latent.rows() {
            return Err(Error::BatchSize {
                expected: latent.rows(),
                got: actions.len(),
            });
        }
        let a = g.constant(self.one_hot(actions)?);
        let mlp = |[l0, l1]: [Dense; 2]| -> Result<Var<'g>> {
            let h = self.linear(g, p, a, l0)?.relu();
            self.linear(g, p, h, l1)
        };
        let scale = mlp(self.film_scale)?;
        let shift = mlp(self.film_shift)?;
        Ok(latent.add(latent.mul(scale)?)?.add(shift)?)
    }

    /// Unit state-action representation conditioned on the memory vector.
    pub fn state_action_repr<'g>(
        &self,
        g: &'g Graph,
        p: &ParamStore,
        latent: Var<'g>,
        actions: &[usize],
        memory: Var<'g>,
    ) -> Result<Var<'g>> {
        self.check_latent("memory", memory)?;
        let x = self.film(g, p, latent, actions)?.concat_cols(memory)?;
        let h = self.normed(g, p, x, self.proj[0])?.relu();
        Ok(self.normed(g, p, h, self.proj[1])?.l2_normalize())
    }
}

/// Unit difference `after - before` per row. Rows whose difference is
/// shorter than [`DEGENERATE_EPS`] come out as zero vectors.
pub fn achievement_repr<'g>(before: Var<'g>, after: Var<'g>) -> Result<Var<'g>> {
    let diff = after.sub(before)?;
    let mask = {
        let d = diff.value();
        let n = d.cols();
        let data = (0..d.rows())
            .flat_map(|r| {
                let keep = if row_norm(d.row_slice(r)) < DEGENERATE_EPS {
                    0.0
                } else {
                    1.0
                };
                std::iter::repeat_n(keep, n)
            })
            .collect();
        Tensor::from_rows(d.rows(), n, data)
    };
    let g = diff.graph();
    Ok(diff.l2_normalize().mul(g.constant(mask))?)
}

/// Like [`achievement_repr`] but rejects degenerate rows.
pub fn achievement_repr_strict<'g>(before: Var<'g>, after: Var<'g>) -> Result<Var<'g>> {
    let degenerate = {
        let (b, a) = (before.value(), after.value());
        a.shape() == b.shape()
            && (0..a.rows()).any(|r| {
                let d: Vec<Real> = a.row_slice(r).iter().zip(b.row_slice(r)).map(|(x, y)| x - y).collect();
                row_norm(&d) < DEGENERATE_EPS
            })
    };
    if degenerate {
        return Err(Error::DegenerateRepresentation);
    }
    achievement_repr(before, after)
}

/// Plain-vector version of [`achievement_repr`] for code outside a graph.
pub fn unit_difference(before: &[Real], after: &[Real]) -> Vec<Real> {
    let d: Vec<Real> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    let n = row_norm(&d);
    if n < DEGENERATE_EPS {
        return vec![0.0; d.len()];
    }
    let n = (n * n + ndauto::L2_EPS).sqrt();
    d.into_iter().map(|x| x / n).collect()
}

fn row_norm(r: &[Real]) -> Real {
    r.iter().map(|x| x * x).sum::<Real>().sqrt()
}

/// Converts environment observations into a `[batch, len]` tensor.
pub fn observation_batch<'a>(obs: impl IntoIterator<Item = &'a [f32]>) -> Tensor {
    let mut rows = 0;
    let mut data = Vec::new();
    for o in obs {
        data.extend(o.iter().map(|&x| x as Real));
        rows += 1;
    }
    let cols = data.len().checked_div(rows).unwrap_or(0);
    Tensor::from_rows(rows, cols, data)
}
