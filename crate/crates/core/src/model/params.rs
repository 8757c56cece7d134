use std::fmt;

use awgnn_tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Embedding width.
    pub dim: usize,
    /// Gated propagation steps.
    pub steps: usize,
    /// Order-decay parameter of the adaptive weights; larger values flatten
    /// the positional multiplier `exp(position / t_order)`.
    pub t_order: f64,
    /// Maximum retained session suffix.
    pub max_len: usize,
    pub use_adaptive: bool,
    pub use_si: bool,
    pub use_msi: bool,
    /// Whether the final position takes part in the adaptive weighted sum.
    pub include_last: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            dim: 100,
            steps: 1,
            t_order: 4.0,
            max_len: 10,
            use_adaptive: false,
            use_si: false,
            use_msi: false,
            include_last: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 {
            return Err(ModelError::InvalidHyper("dim must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(ModelError::InvalidHyper("steps must be at least 1".into()));
        }
        if !(self.t_order > 0.0 && self.t_order.is_finite()) {
            return Err(ModelError::InvalidHyper(
                "t_order must be a positive finite number".into(),
            ));
        }
        if self.max_len == 0 {
            return Err(ModelError::InvalidHyper(
                "max_len must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn uses_side_info(&self) -> bool {
        self.use_si || self.use_msi
    }

    /// Bit set used in checkpoint headers.
    pub fn flag_bits(&self) -> u32 {
        (self.use_adaptive as u32)
            | (self.use_si as u32) << 1
            | (self.use_msi as u32) << 2
            | (self.include_last as u32) << 3
    }

    pub fn variant_name(&self) -> String {
        let mut parts = Vec::new();
        if self.use_adaptive {
            parts.push("aw");
        }
        if self.use_si {
            parts.push("si");
        }
        if self.use_msi {
            parts.push("msi");
        }
        if parts.is_empty() {
            "base".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// Every learnable tensor, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    ItemEmbed,
    SidePairEmbed,
    MsgOutW,
    MsgOutB,
    MsgInW,
    MsgInB,
    GateZW,
    GateZU,
    GateRW,
    GateRU,
    CandW,
    CandU,
    AttnW1,
    AttnW2,
    AttnQ,
    AttnC,
    FuseW3,
    SiProj,
}

impl ParamId {
    pub const ALL: [ParamId; 18] = [
        ParamId::ItemEmbed,
        ParamId::SidePairEmbed,
        ParamId::MsgOutW,
        ParamId::MsgOutB,
        ParamId::MsgInW,
        ParamId::MsgInB,
        ParamId::GateZW,
        ParamId::GateZU,
        ParamId::GateRW,
        ParamId::GateRU,
        ParamId::CandW,
        ParamId::CandU,
        ParamId::AttnW1,
        ParamId::AttnW2,
        ParamId::AttnQ,
        ParamId::AttnC,
        ParamId::FuseW3,
        ParamId::SiProj,
    ];

    pub const COUNT: usize = Self::ALL.len();

    pub fn name(self) -> &'static str {
        match self {
            ParamId::ItemEmbed => "item_embed",
            ParamId::SidePairEmbed => "side_pair_embed",
            ParamId::MsgOutW => "msg_out_w",
            ParamId::MsgOutB => "msg_out_b",
            ParamId::MsgInW => "msg_in_w",
            ParamId::MsgInB => "msg_in_b",
            ParamId::GateZW => "gate_z_w",
            ParamId::GateZU => "gate_z_u",
            ParamId::GateRW => "gate_r_w",
            ParamId::GateRU => "gate_r_u",
            ParamId::CandW => "cand_w",
            ParamId::CandU => "cand_u",
            ParamId::AttnW1 => "attn_w1",
            ParamId::AttnW2 => "attn_w2",
            ParamId::AttnQ => "attn_q",
            ParamId::AttnC => "attn_c",
            ParamId::FuseW3 => "fuse_w3",
            ParamId::SiProj => "si_proj",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    fn slot(self) -> usize {
        self as usize
    }

    /// Shape under the given configuration, or `None` when the variant does
    /// not use this tensor.
    pub fn shape(
        self,
        hyper: &HyperParams,
        item_count: usize,
        pair_count: usize,
    ) -> Option<(usize, usize)> {
        let d = hyper.dim;
        match self {
            ParamId::ItemEmbed => Some((item_count, d)),
            ParamId::SidePairEmbed => hyper.uses_side_info().then_some((pair_count, d)),
            ParamId::MsgOutW | ParamId::MsgInW => Some((d, d)),
            ParamId::MsgOutB | ParamId::MsgInB | ParamId::AttnC => Some((1, d)),
            ParamId::GateZW | ParamId::GateRW | ParamId::CandW => Some((2 * d, d)),
            ParamId::GateZU | ParamId::GateRU | ParamId::CandU => Some((d, d)),
            ParamId::AttnW1 | ParamId::AttnW2 => Some((d, d)),
            ParamId::AttnQ => Some((d, 1)),
            ParamId::FuseW3 => Some((if hyper.use_adaptive { 3 * d } else { 2 * d }, d)),
            ParamId::SiProj => hyper.use_si.then_some((2 * d, d)),
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A set of named tensors keyed by [`ParamId`]; also used for gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    slots: Vec<Option<Matrix>>,
}

impl ModelParams {
    pub fn empty() -> Self {
        Self {
            slots: vec![None; ParamId::COUNT],
        }
    }

    /// A zero tensor for every tensor present in `like`.
    pub fn zeros_like(like: &ModelParams) -> Self {
        let mut out = Self::empty();
        for (id, m) in like.iter() {
            out.insert(id, Matrix::zeros(m.rows(), m.cols()));
        }
        out
    }

    pub fn insert(&mut self, id: ParamId, value: Matrix) {
        if self.slots.is_empty() {
            self.slots = vec![None; ParamId::COUNT];
        }
        self.slots[id.slot()] = Some(value);
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Matrix> {
        self.slots.get_mut(id.slot()).and_then(Option::take)
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.slots.get(id.slot()).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        self.slots.get_mut(id.slot()).and_then(Option::as_mut)
    }

    /// # Panics
    /// If the tensor is absent.
    pub fn expect(&self, id: ParamId) -> &Matrix {
        self.get(id)
            .unwrap_or_else(|| panic!("parameter `{id}` is not present"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        ParamId::ALL
            .into_iter()
            .filter_map(|id| self.get(id).map(|m| (id, m)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Matrix)> {
        self.slots
            .iter_mut()
            .zip(ParamId::ALL)
            .filter_map(|(slot, id)| slot.as_mut().map(|m| (id, m)))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.iter().map(|(id, _)| id).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.iter().map(|(_, m)| m.squared_norm()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, m)| m.is_finite())
    }

    /// `self += other` over the tensors present in both.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (id, m) in self.iter_mut() {
            if let Some(o) = other.get(id) {
                m.add_assign(o).expect("parameter shapes agree");
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, m) in self.iter_mut() {
            m.scale_in_place(factor);
        }
    }
}

/// Uniform initialisation in `[-1/√d, 1/√d]`.
///
/// Each tensor draws from its own ChaCha stream, so the values of a tensor
/// depend only on the seed and its shape; tensors shared by two variants are
/// identical, and the first `2d` rows of a `3d × d` fusion matrix equal the
/// whole `2d × d` matrix of a variant without the adaptive term.
pub fn init_params(
    hyper: &HyperParams,
    item_count: usize,
    pair_count: usize,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    hyper.validate()?;
    let bound = 1.0 / (hyper.dim as f64).sqrt();
    let mut params = ModelParams::empty();
    for id in ParamId::ALL {
        let Some((rows, cols)) = id.shape(hyper, item_count, pair_count) else {
            continue;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64 + 1);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        params.insert(id, Matrix::from_vec(rows, cols, data)?);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(dim: usize) -> HyperParams {
        HyperParams {
            dim,
            ..HyperParams::default()
        }
    }

    #[test]
    fn same_seed_same_params() {
        let h = HyperParams {
            use_adaptive: true,
            use_si: true,
            use_msi: true,
            ..hyper(8)
        };
        assert_eq!(
            init_params(&h, 50, 12, 7).unwrap(),
            init_params(&h, 50, 12, 7).unwrap()
        );
        assert_ne!(
            init_params(&h, 50, 12, 7).unwrap(),
            init_params(&h, 50, 12, 8).unwrap()
        );
    }

    #[test]
    fn shapes_and_bounds() {
        let p = init_params(&hyper(8), 50, 0, 1).unwrap();
        assert_eq!(p.expect(ParamId::ItemEmbed).shape(), (50, 8));
        assert_eq!(p.expect(ParamId::FuseW3).shape(), (16, 8));
        assert!(p.get(ParamId::SiProj).is_none());
        assert!(p.get(ParamId::SidePairEmbed).is_none());
        let bound = 1.0 / 8f64.sqrt();
        assert!(p.iter().all(|(_, m)| m.max_abs() <= bound));
    }

    #[test]
    fn zero_dim_is_rejected() {
        assert!(init_params(&hyper(0), 5, 0, 1).is_err());
    }

    #[test]
    fn adaptive_fusion_extends_base_fusion() {
        let base = init_params(&hyper(4), 10, 0, 3).unwrap();
        let aw = init_params(
            &HyperParams {
                use_adaptive: true,
                ..hyper(4)
            },
            10,
            0,
            3,
        )
        .unwrap();
        let w2 = base.expect(ParamId::FuseW3);
        let w3 = aw.expect(ParamId::FuseW3);
        assert_eq!(&w3.as_slice()[..w2.len()], w2.as_slice());
        assert_eq!(
            base.expect(ParamId::ItemEmbed),
            aw.expect(ParamId::ItemEmbed)
        );
    }

    #[test]
    fn names_round_trip() {
        for id in ParamId::ALL {
            assert_eq!(ParamId::from_name(id.name()), Some(id));
        }
    }
}
