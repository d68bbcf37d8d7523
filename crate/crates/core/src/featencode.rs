//! Per-event feature tokens: multi-scale hexagonal location code, periodic
//! start/stop time codes, entity prototype and activity projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkernel::{Bound, Graph, KernelError, ParamId, ParamRegistry, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    #[default]
    Daily,
    Weekly,
    None,
}

impl Period {
    pub fn hours(self) -> Option<f64> {
        match self {
            Period::Daily => Some(24.0),
            Period::Weekly => Some(168.0),
            Period::None => None,
        }
    }

    /// Wraps `tau` into `[0, period)`; identity for `None`.
    pub fn wrap(self, tau: f64) -> f64 {
        match self.hours() {
            Some(p) => tau.rem_euclid(p),
            None => tau,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Number of spatial scales.
    pub ns: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub period: Period,
    /// Prototype rank.
    pub h: usize,
    /// Remove the entity token from the input while keeping prototypes as
    /// contrastive targets.
    pub drop_entity_token: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            ns: 32,
            lambda_min: 0.01,
            lambda_max: 2.0,
            period: Period::Daily,
            h: 32,
            drop_entity_token: false,
        }
    }
}

impl EncoderConfig {
    /// Tokens per event.
    pub fn n_tokens(&self) -> usize {
        if self.drop_entity_token {
            4
        } else {
            5
        }
    }
}

/// Geometric ladder from `lambda_min` to `lambda_max` with exact endpoints.
pub fn scales(ns: usize, lambda_min: f64, lambda_max: f64) -> Vec<f64> {
    match ns {
        0 => Vec::new(),
        1 => vec![lambda_min],
        _ => (0..ns)
            .map(|s| {
                if s == 0 {
                    lambda_min
                } else if s == ns - 1 {
                    lambda_max
                } else {
                    lambda_min * (lambda_max / lambda_min).powf(s as f64 / (ns - 1) as f64)
                }
            })
            .collect(),
    }
}

pub const LATTICE: [[f64; 2]; 3] = [
    [1.0, 0.0],
    [-0.5, 0.866_025_403_784_438_6],
    [-0.5, -0.866_025_403_784_438_6],
];

/// The `6 * ns` positional code: for each lattice vector and scale, the
/// cosine then sine of the projected phase.
pub fn space2vec_code(coords: [f64; 2], scales: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * scales.len());
    for a in LATTICE {
        let proj = a[0] * coords[0] + a[1] * coords[1];
        for &l in scales {
            let rho = proj / l;
            out.push(rho.cos());
            out.push(rho.sin());
        }
    }
    out
}

/// Everything needed to embed one slot. Positions are dense indices into
/// the substrate, entity table and activity table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotEvent {
    pub context: usize,
    pub entity: usize,
    pub t_start: f64,
    pub duration: Option<f64>,
    pub activity: usize,
}

#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    pub cfg: EncoderConfig,
    pub d_f: usize,
    scales: Vec<f64>,
    /// `[n_contexts, 6 ns]` positional codes of the substrate.
    codes: Tensor,
    pub loc_w: ParamId,
    pub t2v_w: ParamId,
    pub t2v_b: ParamId,
    pub proto_q: ParamId,
    pub proto_wp: ParamId,
    pub act_w: ParamId,
}

impl FeatureEncoder {
    pub fn register(
        reg: &mut ParamRegistry,
        cfg: &EncoderConfig,
        d_f: usize,
        context_coords: &[[f64; 2]],
        n_entities: usize,
        n_activities: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, KernelError> {
        if cfg.h > d_f {
            return Err(KernelError::Shape(format!("prototype rank {} exceeds d_f {d_f}", cfg.h)));
        }
        let sc = scales(cfg.ns, cfg.lambda_min, cfg.lambda_max);
        let width = 6 * cfg.ns;
        let mut codes = Vec::with_capacity(context_coords.len() * width);
        for &c in context_coords {
            codes.extend(space2vec_code(c, &sc));
        }
        let codes = Tensor::new(vec![context_coords.len(), width], codes)?;
        let loc_w = reg.register_uniform("enc.loc.w", &[width, d_f], width, rng)?;
        let t2v_w = reg.register_uniform("enc.time.w", &[d_f], 1, rng)?;
        let t2v_b = reg.register_const("enc.time.b", &[d_f], 0.0)?;
        let proto_q = reg.register_uniform("enc.proto.q", &[n_entities, cfg.h], cfg.h, rng)?;
        let proto_wp = reg.register_uniform("enc.proto.wp", &[cfg.h, d_f], cfg.h, rng)?;
        let act_w = reg.register_uniform("enc.act.w", &[n_activities, d_f], n_activities, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            d_f,
            scales: sc,
            codes,
            loc_w,
            t2v_w,
            t2v_b,
            proto_q,
            proto_wp,
            act_w,
        })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// `[n_contexts, d_f]` location tokens for the whole substrate.
    pub fn location_table(&self, g: &mut Graph, p: &Bound) -> Result<Var, KernelError> {
        let codes = g.constant(self.codes.clone());
        let z = g.matmul(codes, p.get(self.loc_w))?;
        Ok(g.relu(z))
    }

    /// Location token for arbitrary coordinates.
    pub fn encode_location(&self, g: &mut Graph, p: &Bound, coords: &[[f64; 2]]) -> Result<Var, KernelError> {
        let mut pe = Vec::with_capacity(coords.len() * 6 * self.cfg.ns);
        for &c in coords {
            pe.extend(space2vec_code(c, &self.scales));
        }
        let pe = g.constant(Tensor::new(vec![coords.len(), 6 * self.cfg.ns], pe)?);
        let z = g.matmul(pe, p.get(self.loc_w))?;
        Ok(g.relu(z))
    }

    /// `[n, d_f]` periodic time codes.
    pub fn encode_time(&self, g: &mut Graph, p: &Bound, tau: &[f64]) -> Result<Var, KernelError> {
        let wrapped: Vec<f64> = tau.iter().map(|&t| self.cfg.period.wrap(t)).collect();
        g.time2vec(&wrapped, p.get(self.t2v_w), p.get(self.t2v_b))
    }

    /// `[n_entities, d_f]` prototype table `Q W_P`.
    pub fn prototypes(&self, g: &mut Graph, p: &Bound) -> Result<Var, KernelError> {
        g.matmul(p.get(self.proto_q), p.get(self.proto_wp))
    }

    /// Embeds a batch of slots into `[n, F, d_f]`. `None` slots (padding or
    /// masked peers) come out as exact zeros.
    pub fn embed_slots(
        &self,
        g: &mut Graph,
        p: &Bound,
        loc_table: Var,
        protos: Var,
        slots: &[Option<SlotEvent>],
    ) -> Result<Var, KernelError> {
        let n = slots.len();
        let blank = SlotEvent {
            context: 0,
            entity: 0,
            t_start: 0.0,
            duration: None,
            activity: 0,
        };
        let s: Vec<SlotEvent> = slots.iter().map(|x| x.unwrap_or(blank)).collect();
        let ctx: Vec<usize> = s.iter().map(|e| e.context).collect();
        let ent: Vec<usize> = s.iter().map(|e| e.entity).collect();
        let act: Vec<usize> = s.iter().map(|e| e.activity).collect();
        let start: Vec<f64> = s.iter().map(|e| e.t_start).collect();
        let stop: Vec<f64> = s.iter().map(|e| e.t_start + e.duration.unwrap_or(0.0)).collect();

        let d_f = self.d_f;
        let mut tokens = Vec::with_capacity(5);
        tokens.push(g.gather(loc_table, &ctx)?);
        tokens.push(self.encode_time(g, p, &start)?);
        tokens.push(self.encode_time(g, p, &stop)?);
        if !self.cfg.drop_entity_token {
            tokens.push(g.gather(protos, &ent)?);
        }
        tokens.push(g.gather(p.get(self.act_w), &act)?);
        let parts: Vec<Var> = tokens
            .into_iter()
            .map(|t| g.reshape(t, &[n, 1, d_f]))
            .collect::<Result<_, _>>()?;
        let z = g.concat(&parts, 1)?;
        if slots.iter().all(Option::is_some) {
            return Ok(z);
        }
        let keep: Vec<f64> = slots.iter().map(|x| if x.is_some() { 1.0 } else { 0.0 }).collect();
        g.mul_const(z, &keep, &[n])
    }

    /// The `F x d_f` token matrix of a single event.
    pub fn embed_event(&self, reg: &ParamRegistry, ev: SlotEvent) -> Result<Tensor, KernelError> {
        let mut g = Graph::new();
        let p = g.bind(reg);
        let lt = self.location_table(&mut g, &p)?;
        let pr = self.prototypes(&mut g, &p)?;
        let z = self.embed_slots(&mut g, &p, lt, pr, &[Some(ev)])?;
        let f = self.cfg.n_tokens();
        g.value(z).clone().reshape(&[f, self.d_f])
    }
}
