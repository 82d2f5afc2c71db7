use crate::autodiff::gradcheck::{check, sample_coords, GradCheckOptions, GradCheckReport};
use crate::autodiff::{Graph, ParamBuilder, ParamStore, Var};
use crate::blocks::{A2vBlock, BlockDims, ContextFusionBlock, TemporalBlock, V2aBlock, V2aLevel, VssBlock};
use crate::error::Result;
use crate::layout::direction_set;
use crate::model::{segmentation_loss, ClipInput, Model, ModelConfig};
use crate::rng::Rng;
use crate::ssm::{Gate, ScanImpl, SsmParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

const DIM: usize = 4;
const STATE: usize = 3;
const FRAMES: usize = 2;

type LossFn = Box<dyn Fn(&mut Graph<'_, f64>) -> Result<Var>>;

/// `Σ x ⊙ w` for a fixed random `w`, so every output element matters.
fn probe(g: &mut Graph<'_, f64>, x: Var, w: &Tensor<f64>) -> Var {
    let c = g.constant(w.clone());
    let y = g.mul(x, c);
    g.sum(y)
}

fn input(pb: &mut ParamBuilder<'_, f64>, name: &str, shape: &[usize]) -> crate::autodiff::ParamId {
    let t = Tensor::normal(shape.to_vec(), 1.0, pb.rng());
    pb.tensor(name, t)
}

fn probes(shapes: &[&[usize]], rng: &mut Rng) -> Vec<Tensor<f64>> {
    shapes.iter().map(|s| Tensor::normal(s.to_vec(), 1.0, rng)).collect()
}

fn block_case(name: &'static str, pb: &mut ParamBuilder<'_, f64>) -> Result<LossFn> {
    let mut dims = BlockDims::new(DIM, STATE);
    let fine = [FRAMES, 4, 4, DIM];
    let coarse = [FRAMES, 2, 2, DIM];
    let audio = [FRAMES, DIM];
    let vis = input(pb, "input.visual", &fine);
    let vis2 = input(pb, "input.visual_coarse", &coarse);
    let aud = input(pb, "input.audio", &audio);
    let loss: LossFn = match name {
        "ssm" | "ssm_parallel" => {
            let imp = if name == "ssm" {
                ScanImpl::Sequential
            } else {
                ScanImpl::Parallel
            };
            let ssm = SsmParams::new(pb, "ssm", DIM, STATE);
            let u = input(pb, "input.u", &[2, 5, DIM]);
            let w = probes(&[&[2, 5, DIM]], pb.rng()).remove(0);
            Box::new(move |g| {
                let u = g.param(u);
                let y = ssm.forward(g, u, imp)?;
                Ok(probe(g, y, &w))
            })
        }
        "gate" => {
            let gate = Gate::new(pb, "gate", DIM, 2 * DIM);
            let y = input(pb, "input.y", &[6, 2 * DIM]);
            let z = input(pb, "input.z", &[6, DIM]);
            let w = probes(&[&[6, DIM]], pb.rng()).remove(0);
            Box::new(move |g| {
                let (y, z) = (g.param(y), g.param(z));
                let out = gate.forward(g, y, z, z)?;
                Ok(probe(g, out, &w))
            })
        }
        "vss" | "temporal" => {
            let w = probes(&[&fine, &coarse], pb.rng());
            let run: Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Vec<Var>>> = if name == "vss" {
                let b = VssBlock::new(pb, "vss", dims);
                Box::new(move |g, s| b.forward(g, s))
            } else {
                let b = TemporalBlock::new(pb, "temporal", dims, &direction_set(8)?);
                Box::new(move |g, s| b.forward(g, s))
            };
            Box::new(move |g| {
                let s = [g.param(vis), g.param(vis2)];
                let out = run(g, &s)?;
                let l0 = probe(g, out[0], &w[0]);
                let l1 = probe(g, out[1], &w[1]);
                Ok(g.add(l0, l1))
            })
        }
        "v2a_frame" | "v2a_temporal" | "v2a_parallel" => {
            let level = if name == "v2a_frame" {
                V2aLevel::Frame
            } else {
                V2aLevel::Temporal
            };
            if name == "v2a_parallel" {
                dims.scan = ScanImpl::Parallel;
            }
            let b = V2aBlock::new(pb, "v2a", dims, level);
            let w = probes(&[&audio], pb.rng()).remove(0);
            Box::new(move |g| {
                let (v, a) = (g.param(vis), g.param(aud));
                let out = b.forward(g, v, a)?;
                Ok(probe(g, out, &w))
            })
        }
        "a2v" | "cfb" => {
            let w = probes(&[&fine], pb.rng()).remove(0);
            let run: Box<dyn Fn(&mut Graph<'_, f64>, Var, Var) -> Result<Var>> = if name == "a2v" {
                let b = A2vBlock::new(pb, "a2v", dims);
                Box::new(move |g, v, a| b.forward(g, v, a))
            } else {
                let b = ContextFusionBlock::new(pb, "cfb", dims, &direction_set(4)?);
                Box::new(move |g, v, a| b.forward(g, v, a))
            };
            Box::new(move |g| {
                let (v, a) = (g.param(vis), g.param(aud));
                let out = run(g, v, a)?;
                Ok(probe(g, out, &w))
            })
        }
        _ => unreachable!("unknown case {name}"),
    };
    Ok(loss)
}

/// Redraws every parameter from `N(0, 0.5²)`.
fn randomize(store: &mut ParamStore<f64>, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::normal(shape, 0.5, rng);
    }
}

pub const BLOCK_CASES: [&str; 10] = [
    "ssm",
    "ssm_parallel",
    "gate",
    "vss",
    "temporal",
    "v2a_frame",
    "v2a_temporal",
    "v2a_parallel",
    "a2v",
    "cfb",
];

/// Smallest model the stems accept: 32×32 input, two frames, `T_max = 3`.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        channels: DIM,
        state: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        direction_count: 2,
        num_classes: 1,
        t_max: 3,
        height: 32,
        width: 32,
        audio_dim: 6,
        ..ModelConfig::default()
    }
}

fn model_case(seed: u64, coords: usize, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = tiny_model_config();
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::derive(seed, 99);
    let model = Model::new(&cfg, &mut store, &mut rng)?;
    randomize(&mut store, &mut rng);
    let video = Tensor::uniform([FRAMES, cfg.height, cfg.width, 3], 0.0, 1.0, &mut rng);
    let audio = Tensor::normal([FRAMES, cfg.audio_dim], 1.0, &mut rng);
    let clip = ClipInput::pad(&video, &audio, cfg.t_max)?;
    let masks = Tensor::from_fn([cfg.t_max, cfg.height, cfg.width], |i| {
        let (y, x) = ((i / cfg.width) % cfg.height, i % cfg.width);
        if (8..20).contains(&y) && (6..22).contains(&x) {
            1.0
        } else {
            0.0
        }
    });
    let picked = sample_coords(&store, coords, &mut rng, |_| true);
    check(&mut store, &picked, opts, |g| {
        let out = model.forward(g, &clip)?;
        segmentation_loss(g, out.mask_logits, &masks, &clip.valid, cfg.num_classes)
    })
}

/// Finite-difference checks of every composite block (inputs included as
/// parameters) and of a tiny full model, `coords` coordinates each.
pub fn gradcheck_suite(seed: u64, coords: usize) -> Result<Vec<GradCheckEntry>> {
    gradcheck_suite_with(seed, coords, GradCheckOptions::default())
}

pub fn gradcheck_suite_with(seed: u64, coords: usize, opts: GradCheckOptions) -> Result<Vec<GradCheckEntry>> {
    let mut out = Vec::new();
    for (k, name) in BLOCK_CASES.into_iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::derive(seed, k as u64);
        let loss = block_case(name, &mut ParamBuilder::new(&mut store, &mut rng))?;
        randomize(&mut store, &mut rng);
        let picked = sample_coords(&store, coords, &mut rng, |_| true);
        let report = check(&mut store, &picked, opts, |g| loss(g))?;
        out.push(GradCheckEntry { name, report });
    }
    out.push(GradCheckEntry {
        name: "model",
        report: model_case(seed, coords, opts)?,
    });
    Ok(out)
}
