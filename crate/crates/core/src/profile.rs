//! Parameter and FLOP accounting, computed analytically from the model's
//! layer shapes (no forward pass).
//!
//! FLOP convention: one multiply-accumulate is 2 FLOPs. Convolutions count
//! `2·H_out·W_out·C_out·K_h·K_w·C_in/groups`; attention counts `q·kᵀ` and
//! `A·v` as `2·T_q·T_kv·d` each per head; normalization costs 5 and
//! activations (GELU, softmax) 10 FLOPs per element. Pooling, upsampling,
//! bias adds and residual adds are free.

use serde::Serialize;

use crate::model::{FctModel, ModelConfig};

pub const FLOP_CONVENTION: &str = "1 MAC = 2 FLOPs; conv 2*Ho*Wo*Cout*Kh*Kw*Cin/groups; \
attention q.k^T and A.v 2*Tq*Tkv*d per head each; norm 5/elem; activation 10/elem; \
pooling/upsampling/residual adds not counted; per single image";

/// Reference figures for the default 224×224 configuration.
pub const REFERENCE_PARAMS: f64 = 31.7e6;
pub const REFERENCE_GFLOPS: f64 = 7.87;
/// Parameter count quoted for the same model in the ablation setting.
pub const REFERENCE_PARAMS_ABLATION: f64 = 16.1e6;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct StageRow {
    pub name: String,
    /// Spatial side entering the stage (before any decoder upsample).
    pub input: [usize; 2],
    /// Spatial side the stage emits.
    pub output: [usize; 2],
    pub channels: usize,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ProfileReport {
    pub input_size: [usize; 2],
    pub param_count: usize,
    pub flops: u64,
    pub stages: Vec<StageRow>,
    pub convention: &'static str,
}

/// Relative agreement within which a measured figure "agrees" with a
/// reference.
pub const AGREEMENT_BAND: f64 = 0.10;

#[derive(Clone, Debug, Serialize)]
pub struct ReferenceComparison {
    pub measured_params: usize,
    pub reference_params: f64,
    pub params_agree: bool,
    pub measured_gflops: f64,
    pub reference_gflops: f64,
    pub gflops_agree: bool,
}

impl ProfileReport {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn compare_reference(&self) -> ReferenceComparison {
        let agree = |m: f64, r: f64| ((m - r) / r).abs() <= AGREEMENT_BAND;
        ReferenceComparison {
            measured_params: self.param_count,
            reference_params: REFERENCE_PARAMS,
            params_agree: agree(self.param_count as f64, REFERENCE_PARAMS),
            measured_gflops: self.gflops(),
            reference_gflops: REFERENCE_GFLOPS,
            gflops_agree: agree(self.gflops(), REFERENCE_GFLOPS),
        }
    }

    /// Plain-text table, one line per stage plus a heads line.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>9} {:>9} {:>8} {:>12} {:>16}\n",
            "stage", "in", "out", "filters", "params", "flops"
        );
        for r in &self.stages {
            let res = |v: [usize; 2]| if v[0] == 0 { "-".to_string() } else { format!("{}x{}", v[0], v[1]) };
            s.push_str(&format!(
                "{:<12} {:>9} {:>9} {:>8} {:>12} {:>16}\n",
                r.name,
                res(r.input),
                res(r.output),
                r.channels,
                r.params,
                r.flops
            ));
        }
        s.push_str(&format!(
            "total params {} ({:.2}M), flops {} ({:.3} GFLOPs)\n",
            self.param_count,
            self.param_count as f64 / 1e6,
            self.flops,
            self.gflops()
        ));
        s
    }
}

pub fn profile(model: &FctModel) -> ProfileReport {
    profile_at(model, model.cfg.input_size)
}

/// Profile as if the model ran at `size` (parameters do not depend on it).
pub fn profile_at(model: &FctModel, size: [usize; 2]) -> ProfileReport {
    let [h, w] = size;
    let mut stages = Vec::new();
    for (i, (name, layer)) in model.stages().enumerate() {
        let (ih, iw) = match i {
            0 => (h, w),
            1..=4 => (h >> i, w >> i),
            _ => (h >> (9 - i), w >> (9 - i)),
        };
        let mut params = layer.param_count();
        let mut flops = layer.flops(ih, iw);
        if (1..=3).contains(&i) && model.cfg.pyramid_inputs {
            let conv = &model.pyramid[i - 1];
            params += conv.param_count();
            flops += conv.flops(ih, iw);
        }
        stages.push(StageRow {
            name: name.to_string(),
            input: [ih, iw],
            output: [layer.out_extent(ih), layer.out_extent(iw)],
            channels: layer.cfg.filters,
            params,
            flops,
        });
    }
    let (hp, hf) = model.heads.iter().fold((0, 0), |(p, f), head| {
        (
            p + head.conv.param_count(),
            f + head.conv.flops(h / head.divisor, w / head.divisor),
        )
    });
    stages.push(StageRow {
        name: "heads".into(),
        input: [0, 0],
        output: [0, 0],
        channels: model.cfg.num_classes,
        params: hp,
        flops: hf,
    });
    ProfileReport {
        input_size: size,
        param_count: stages.iter().map(|s| s.params).sum(),
        flops: stages.iter().map(|s| s.flops).sum(),
        stages,
        convention: FLOP_CONVENTION,
    }
}

/// Convenience for callers that only hold a config.
pub fn profile_config(cfg: &ModelConfig) -> crate::Result<ProfileReport> {
    Ok(profile(&FctModel::new(cfg.clone(), 0)?))
}
