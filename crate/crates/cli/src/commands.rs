use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use eraser_core::checkpoint::{load_checkpoint, load_pair, save_checkpoint};
use eraser_core::data::Split;
use eraser_core::denoiser::Branch;
use eraser_core::guidance::GuidanceScales;
use eraser_core::io::{read_dataset, write_dataset, write_tensor};
use eraser_core::metrics::{evaluate, generate_outputs, score_sample, sweep_guidance, SampleScores};
use eraser_core::sampler::{ExpertPair, ExpertRole, SamplerKind, Schedule};
use eraser_core::trainer::{train_stage1 as run_stage1, train_stage2 as run_stage2, LogRecord, TrainingSets};
use eraser_core::world::SampleRecord;
use eraser_core::Error;
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Common, ExpertChoice, Inputs, SamplerChoice, Sampling, SplitChoice};

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    cfg.apply_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::MissingFile(path.to_path_buf()).into());
    }
    Ok(())
}

fn load_split(data: &Path, split: Split) -> Result<Vec<SampleRecord>> {
    let dir = data.join(split.as_str());
    require_dir(&dir)?;
    read_dataset(&dir).with_context(|| format!("loading split `{}`", split.as_str()))
}

struct JsonLog(BufWriter<File>);

impl JsonLog {
    fn create(path: &Path) -> Result<JsonLog> {
        Ok(JsonLog(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?)))
    }

    fn record(&mut self, r: &LogRecord) {
        info!("stage {} {} step {} loss {:.5}", r.stage, r.expert.as_str(), r.step, r.loss);
        if let Err(e) = serde_json::to_writer(&mut self.0, r).map_err(std::io::Error::from).and_then(|_| self.0.write_all(b"\n")) {
            log::warn!("training log write failed: {e}");
        }
    }
}

pub fn gen_data(common: &Common) -> Result<()> {
    let mut cfg = resolve(common)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.data.clone());
    for split in Split::ALL {
        let samples = cfg.data.generate(split)?;
        write_dataset(&samples, &out.join(split.as_str()))?;
        info!("{}: {} samples", split.as_str(), samples.len());
    }
    cfg.paths.data = out.clone();
    cfg.write(&out)
}

fn roles(choice: ExpertChoice) -> Vec<ExpertRole> {
    match choice {
        ExpertChoice::Locator => vec![ExpertRole::Locator],
        ExpertChoice::Preserver => vec![ExpertRole::Preserver],
        ExpertChoice::Pair => vec![ExpertRole::Locator, ExpertRole::Preserver],
    }
}

pub fn train_stage1(common: &Common, inputs: &Inputs, expert: ExpertChoice) -> Result<()> {
    let mut cfg = resolve(common)?;
    let data = inputs.data.clone().unwrap_or_else(|| cfg.paths.data.clone());
    require_dir(&data)?;
    let root = common.out.clone().unwrap_or_else(|| cfg.paths.checkpoints.clone());
    let stage_dir = root.join("stage1");
    let roles = roles(expert);
    let needs_misaligned = roles.iter().any(|&r| cfg.train.stage1_mix(r).aligned_fraction < 1.0);
    let sets = TrainingSets {
        aligned: load_split(&data, Split::Train)?,
        misaligned: if needs_misaligned { load_split(&data, Split::Misaligned)? } else { Vec::new() },
    };
    fs::create_dir_all(&stage_dir)?;
    for role in roles {
        let dir = stage_dir.join(role.as_str());
        fs::create_dir_all(&dir)?;
        let mut log = JsonLog::create(&dir.join("train_log.jsonl"))?;
        let out = run_stage1(role, &cfg.model, &sets, &cfg.train, &mut |r| log.record(r))?;
        save_checkpoint(&out.model, role, 1, cfg.train.steps_for(role), &dir)?;
        for (step, snapshot) in &out.snapshots {
            save_checkpoint(snapshot, role, 1, *step, &stage_dir.join(format!("{}_step{step}", role.as_str())))?;
        }
    }
    cfg.paths.data = data;
    cfg.paths.checkpoints = root;
    cfg.write(&stage_dir)
}

pub fn train_stage2(common: &Common, inputs: &Inputs, steps: Option<usize>, unfreeze_base: bool) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(s) = steps {
        cfg.train.stage2_steps = s;
    }
    cfg.train.stage2_unfreeze_base |= unfreeze_base;
    let data = inputs.data.clone().unwrap_or_else(|| cfg.paths.data.clone());
    require_dir(&data)?;
    let root = common.out.clone().unwrap_or_else(|| cfg.paths.checkpoints.clone());
    let source = inputs.checkpoints.clone().unwrap_or_else(|| root.clone()).join("stage1");
    require_dir(&source)?;
    let pair = load_pair(&source, cfg.train.boundary)?;
    let sets = TrainingSets {
        aligned: load_split(&data, Split::Train)?,
        misaligned: if cfg.train.stage2_data.aligned_fraction < 1.0 { load_split(&data, Split::Misaligned)? } else { Vec::new() },
    };
    let stage_dir = root.join("stage2");
    fs::create_dir_all(&stage_dir)?;
    let mut log = JsonLog::create(&stage_dir.join("train_log.jsonl"))?;
    let pair = run_stage2(pair, &sets, &cfg.train, &mut |r| log.record(r))?;
    for role in [ExpertRole::Locator, ExpertRole::Preserver] {
        save_checkpoint(pair.expert(role), role, 2, cfg.train.stage2_steps, &stage_dir.join(role.as_str()))?;
    }
    cfg.paths.data = data;
    cfg.paths.checkpoints = root;
    cfg.write(&stage_dir)
}

struct Prepared {
    cfg: RunConfig,
    pair: ExpertPair,
    samples: Vec<SampleRecord>,
    kind: SamplerKind,
    schedule: Schedule,
    out: PathBuf,
}

fn prepare(common: &Common, inputs: &Inputs, s: &Sampling) -> Result<Prepared> {
    let mut cfg = resolve(common)?;
    if let Some(v) = s.steps {
        cfg.sample.steps = v;
    }
    if let Some(v) = s.boundary {
        cfg.sample.boundary = v;
    }
    if let Some(v) = s.w_txt {
        cfg.sample.w_txt = v;
    }
    if let Some(v) = s.w_m {
        cfg.sample.w_m = v;
    }
    if let Some(v) = s.split {
        cfg.eval.split = match v {
            SplitChoice::Train => Split::Train,
            SplitChoice::Misaligned => Split::Misaligned,
            SplitChoice::Test => Split::Test,
            SplitChoice::Ood => Split::Ood,
        };
    }
    if s.limit.is_some() {
        cfg.eval.limit = s.limit;
    }
    cfg.validate()?;
    let scales = GuidanceScales::new(cfg.sample.w_m, cfg.sample.w_txt)?;
    let schedule = Schedule::uniform(cfg.sample.steps)?;

    let data = inputs.data.clone().unwrap_or_else(|| cfg.paths.data.clone());
    let ckpt_dir = inputs.checkpoints.clone().unwrap_or_else(|| cfg.paths.checkpoints.clone()).join(format!("stage{}", s.stage));
    require_dir(&data)?;
    require_dir(&ckpt_dir)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.out.clone());

    let pair = match s.expert {
        ExpertChoice::Pair => load_pair(&ckpt_dir, cfg.sample.boundary)?,
        one => {
            let role = if one == ExpertChoice::Locator { ExpertRole::Locator } else { ExpertRole::Preserver };
            let (m, _) = load_checkpoint(&ckpt_dir.join(role.as_str()))?;
            ExpertPair::new(m.clone(), m, cfg.sample.boundary)?
        }
    };
    let kind = match s.sampler.unwrap_or(if s.stage == 2 { SamplerChoice::LdCfg } else { SamplerChoice::McCfg }) {
        SamplerChoice::LdCfg => SamplerKind::LdCfg,
        SamplerChoice::McCfg => SamplerKind::McCfg { scales },
        SamplerChoice::ConditionalOnly => SamplerKind::Conditional { branch: Branch::Full },
        SamplerChoice::MaskOnly => SamplerKind::Conditional { branch: Branch::MaskOnly },
        SamplerChoice::TextOnly => SamplerKind::Conditional { branch: Branch::TextOnly },
    };
    let mut samples = load_split(&data, cfg.eval.split)?;
    if let Some(n) = cfg.eval.limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("split `{}` has no samples to run", cfg.eval.split.as_str())).into());
    }
    cfg.paths.data = data;
    cfg.paths.out = out.clone();
    Ok(Prepared { cfg, pair, samples, kind, schedule, out })
}

#[derive(Serialize)]
struct InferredSample {
    file: String,
    shape: [usize; 4],
    scores: SampleScores,
}

#[derive(Serialize)]
struct InferReport {
    sampler: SamplerKind,
    steps: usize,
    seed: u64,
    samples: Vec<InferredSample>,
}

pub fn infer(common: &Common, inputs: &Inputs, s: &Sampling) -> Result<()> {
    let p = prepare(common, inputs, s)?;
    let outputs = generate_outputs(&p.pair, &p.samples, p.kind, &p.schedule, p.cfg.sample.seed)?;
    let dir = p.out.join("samples");
    fs::create_dir_all(&dir)?;
    let mut report = InferReport { sampler: p.kind, steps: p.schedule.steps(), seed: p.cfg.sample.seed, samples: Vec::new() };
    for (i, (sample, out)) in p.samples.iter().zip(&outputs).enumerate() {
        let file = format!("samples/sample_{i:05}.bin");
        write_tensor(&p.out.join(&file), out)?;
        let (t, h, w, c) = out.dim();
        report.samples.push(InferredSample { file, shape: [t, h, w, c], scores: score_sample(sample, out)? });
    }
    fs::write(p.out.join("infer.json"), serde_json::to_vec_pretty(&report)?)?;
    p.cfg.write(&p.out)
}

pub fn eval(common: &Common, inputs: &Inputs, s: &Sampling) -> Result<()> {
    let p = prepare(common, inputs, s)?;
    let report = evaluate(&p.pair, &p.samples, p.kind, &p.schedule, p.cfg.sample.seed)?;
    info!("mean PSNR {:.3} dB, SSIM {:.4}", report.aggregate.psnr, report.aggregate.ssim);
    fs::create_dir_all(&p.out)?;
    fs::write(p.out.join("eval_report.json"), serde_json::to_vec_pretty(&report)?)?;
    p.cfg.write(&p.out)
}

pub fn sweep(common: &Common, inputs: &Inputs, s: &Sampling) -> Result<()> {
    let p = prepare(common, inputs, s)?;
    let table = sweep_guidance(&p.pair, &p.samples, &p.cfg.eval.sweep_w_txt, &p.cfg.eval.sweep_w_m, &p.schedule, p.cfg.sample.seed)?;
    info!("grid mean {:.3} dB, best {:.3} dB at w_txt={} w_m={}", table.mean, table.best.psnr, table.best.w_txt, table.best.w_m);
    fs::create_dir_all(&p.out)?;
    fs::write(p.out.join("sweep.csv"), table.to_csv())?;
    fs::write(p.out.join("sweep.json"), serde_json::to_vec_pretty(&table)?)?;
    p.cfg.write(&p.out)
}
