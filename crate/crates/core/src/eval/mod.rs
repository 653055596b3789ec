//! Anomaly scoring and AUC / pAUC / mAUC reporting.

mod metrics;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, WeightSet};
use crate::corpus::{AudioClip, ClassMap, ClipLoader, ClipMetadata, DatasetManifest, Label, MachineKey};
use crate::error::{Error, Result};
use crate::features::LogMel;
use crate::model::OsSclModel;

pub use metrics::{auc, mauc, pauc, pauc_raw_area, pauc_scaled, PaucScale};

pub const SCORES_FILE: &str = "scores.csv";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const DEFAULT_PAUC_P: f64 = 0.1;

/// Clips scored per forward pass.
const SCORE_CHUNK: usize = 16;

/// `−log softmax(logits)[class]`, computed in f64.
pub fn score_from_logits(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[class]
}

/// A trained model ready to score clips against their claimed machine ID.
pub struct Scorer {
    model: OsSclModel,
    class_map: ClassMap,
    logmel: LogMel,
    loader: ClipLoader,
}

impl Scorer {
    pub fn new(ckpt: &Checkpoint, which: WeightSet) -> Result<Self> {
        let stft = &ckpt.model.stft;
        Ok(Self {
            model: ckpt.build_model(which)?,
            class_map: ckpt.class_map.clone(),
            logmel: LogMel::new(stft)?,
            loader: ClipLoader::new(stft.sample_rate, stft.clip_samples),
        })
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.class_map
    }

    pub fn model(&self) -> &OsSclModel {
        &self.model
    }

    pub fn loader(&self) -> &ClipLoader {
        &self.loader
    }

    /// Scores waveforms of exactly `clip_samples` samples against class indices.
    pub fn score_waveforms(&self, waves: &[&[f32]], classes: &[usize]) -> Result<Vec<f64>> {
        if waves.len() != classes.len() {
            return Err(Error::invalid("one class index per waveform required"));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= self.class_map.len()) {
            return Err(Error::UnknownMachine(format!("class index {c}")));
        }
        let stft = self.logmel.config();
        let (m, n, l) = (stft.n_mels, stft.n_frames(), stft.clip_samples);
        let mut out = Vec::with_capacity(waves.len());
        for (ws, cs) in waves.chunks(SCORE_CHUNK).zip(classes.chunks(SCORE_CHUNK)) {
            for w in ws {
                if w.len() != l {
                    return Err(Error::shape(format!("clip has {} samples, model expects {l}", w.len())));
                }
            }
            let mels: Vec<Vec<f32>> = ws
                .par_iter()
                .map(|w| self.logmel.compute(w).map(|a| a.into_raw_vec_and_offset().0))
                .collect::<Result<_>>()?;
            let b = ws.len();
            let mel = Tensor::from_vec(mels.concat(), (b, m, n), &Device::Cpu)?;
            let wave = if self.model.config().feature_mode.needs_waveform() {
                Some(Tensor::from_vec(ws.concat(), (b, l), &Device::Cpu)?)
            } else {
                None
            };
            let feats = self.model.features(&mel, wave.as_ref(), false)?;
            let emb = self.model.embed(&feats, false)?;
            let logits = self.model.logits(&emb)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            out.extend(logits.iter().zip(cs).map(|(row, &c)| score_from_logits(row, c)));
        }
        Ok(out)
    }

    pub fn score_clip(&self, clip: &AudioClip) -> Result<f64> {
        let class = self.class_map.index_of(&clip.meta.key())?;
        Ok(self.score_waveforms(&[&clip.samples], &[class])?[0])
    }

    pub fn score_file(&self, path: &Path, key: &MachineKey) -> Result<f64> {
        let class = self.class_map.index_of(key)?;
        let samples = self.loader.load_samples(path)?;
        Ok(self.score_waveforms(&[&samples], &[class])?[0])
    }
}

/// Scores one clip with the checkpoint's EMA weights.
pub fn anomaly_score(ckpt: &Checkpoint, clip: &AudioClip) -> Result<f64> {
    Scorer::new(ckpt, WeightSet::Ema)?.score_clip(clip)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredClip {
    pub meta: ClipMetadata,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdMetrics {
    pub machine_type: String,
    pub machine_id: u32,
    pub n_normal: usize,
    pub n_anomaly: usize,
    pub auc: f64,
    pub pauc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub machine_type: String,
    pub n_ids: usize,
    /// Mean over IDs.
    pub auc: f64,
    pub pauc: f64,
    /// Minimum over IDs.
    pub mauc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub auc: f64,
    pub pauc: f64,
    pub mauc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub p: f64,
    pub per_id: Vec<IdMetrics>,
    pub per_type: Vec<TypeMetrics>,
    /// Arithmetic mean over machine types.
    pub average: Averages,
    /// Arithmetic mean over all IDs (mAUC is still the mean of type minima).
    pub average_over_ids: Averages,
    /// Which of the two averages the summary row reports.
    pub summary_over_ids: bool,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl EvalReport {
    /// Groups scores by machine ID and computes every metric.
    pub fn from_scores(scored: &[ScoredClip], p: f64, summary_over_ids: bool) -> Result<Self> {
        let mut groups: BTreeMap<MachineKey, (Vec<f64>, Vec<Label>)> = BTreeMap::new();
        for s in scored {
            let g = groups.entry(s.meta.key()).or_default();
            g.0.push(s.score);
            g.1.push(s.meta.label);
        }
        if groups.is_empty() {
            return Err(Error::invalid("no scored test clips"));
        }
        let per_id = groups
            .into_iter()
            .map(|(key, (scores, labels))| {
                let a = auc(&scores, &labels).map_err(|e| Error::invalid(format!("{key}: {e}")))?;
                let pa = pauc(&scores, &labels, p).map_err(|e| Error::invalid(format!("{key}: {e}")))?;
                Ok(IdMetrics {
                    n_normal: labels.iter().filter(|&&l| l == Label::Normal).count(),
                    n_anomaly: labels.iter().filter(|&&l| l == Label::Anomaly).count(),
                    machine_type: key.machine_type,
                    machine_id: key.machine_id,
                    auc: a,
                    pauc: pa,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut per_type: Vec<TypeMetrics> = Vec::new();
        for chunk in per_id.chunk_by(|a, b| a.machine_type == b.machine_type) {
            per_type.push(TypeMetrics {
                machine_type: chunk[0].machine_type.clone(),
                n_ids: chunk.len(),
                auc: mean(chunk.iter().map(|m| m.auc)),
                pauc: mean(chunk.iter().map(|m| m.pauc)),
                mauc: mauc(chunk.iter().map(|m| (m.machine_id, m.auc)))?,
            });
        }
        let type_mauc = mean(per_type.iter().map(|t| t.mauc));
        Ok(Self {
            p,
            average: Averages {
                auc: mean(per_type.iter().map(|t| t.auc)),
                pauc: mean(per_type.iter().map(|t| t.pauc)),
                mauc: type_mauc,
            },
            average_over_ids: Averages {
                auc: mean(per_id.iter().map(|m| m.auc)),
                pauc: mean(per_id.iter().map(|m| m.pauc)),
                mauc: type_mauc,
            },
            per_id,
            per_type,
            summary_over_ids,
        })
    }

    pub fn summary(&self) -> &Averages {
        if self.summary_over_ids {
            &self.average_over_ids
        } else {
            &self.average
        }
    }

    /// Percent-formatted table: one row per ID, per type, and the average.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let csv_err = |e: csv::Error| Error::io("writing report csv", e.into());
        wtr.write_record(["section", "machine_type", "machine_id", "auc", "pauc", "mauc"]).map_err(csv_err)?;
        for m in &self.per_id {
            wtr.write_record(["id", &m.machine_type, &m.machine_id.to_string(), &pct(m.auc), &pct(m.pauc), ""])
                .map_err(csv_err)?;
        }
        for t in &self.per_type {
            wtr.write_record(["type", &t.machine_type, "", &pct(t.auc), &pct(t.pauc), &pct(t.mauc)])
                .map_err(csv_err)?;
        }
        let a = self.summary();
        wtr.write_record(["average", "", "", &pct(a.auc), &pct(a.pauc), &pct(a.mauc)]).map_err(csv_err)?;
        wtr.flush().map_err(|e| Error::io("writing report csv", e))
    }

    /// Plain-text table with one row per machine type and an average row.
    pub fn summary_table(&self) -> String {
        let mut s = format!("{:<16} {:>8} {:>8} {:>8}\n", "machine type", "AUC", "pAUC", "mAUC");
        for t in &self.per_type {
            s += &format!(
                "{:<16} {:>8.2} {:>8.2} {:>8.2}\n",
                t.machine_type,
                100.0 * t.auc,
                100.0 * t.pauc,
                100.0 * t.mauc
            );
        }
        let a = self.summary();
        s += &format!("{:<16} {:>8.2} {:>8.2} {:>8.2}\n", "Average", 100.0 * a.auc, 100.0 * a.pauc, 100.0 * a.mauc);
        s
    }
}

pub fn write_scores_csv<W: Write>(scored: &[ScoredClip], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::io("writing scores csv", e.into());
    wtr.write_record(["machine_type", "machine_id", "label", "score", "path"]).map_err(csv_err)?;
    for s in scored {
        wtr.write_record([
            s.meta.machine_type.as_str(),
            &s.meta.machine_id.to_string(),
            s.meta.label.as_str(),
            &s.score.to_string(),
            &s.meta.path.to_string_lossy(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io("writing scores csv", e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub weights: WeightSet,
    pub p: f64,
    pub summary_over_ids: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            weights: WeightSet::Ema,
            p: DEFAULT_PAUC_P,
            summary_over_ids: false,
        }
    }
}

/// Scores every test clip of the manifest against its own claimed ID.
pub fn score_test_split(ckpt: &Checkpoint, manifest: &DatasetManifest, weights: WeightSet) -> Result<Vec<ScoredClip>> {
    let scorer = Scorer::new(ckpt, weights)?;
    let test: Vec<&ClipMetadata> = manifest.test_indices().into_iter().map(|i| &manifest.clips[i]).collect();
    if test.is_empty() {
        return Err(Error::invalid("manifest has no test clips"));
    }
    let mut scored = Vec::with_capacity(test.len());
    for chunk in test.chunks(SCORE_CHUNK) {
        let classes = chunk
            .iter()
            .map(|m| {
                scorer
                    .class_map()
                    .get(&m.key())
                    .ok_or_else(|| Error::UnknownMachine(m.key().to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let waves: Vec<Vec<f32>> = chunk
            .par_iter()
            .map(|m| scorer.loader().load_samples(&m.path))
            .collect::<Result<_>>()?;
        let refs: Vec<&[f32]> = waves.iter().map(|w| w.as_slice()).collect();
        let scores = scorer.score_waveforms(&refs, &classes)?;
        for (m, score) in chunk.iter().zip(scores) {
            if !score.is_finite() {
                return Err(Error::invalid(format!("non-finite score for {}", m.path.display())));
            }
            scored.push(ScoredClip {
                meta: (*m).clone(),
                score,
            });
        }
    }
    Ok(scored)
}

pub fn evaluate(ckpt: &Checkpoint, manifest: &DatasetManifest, opts: &EvalOptions) -> Result<(Vec<ScoredClip>, EvalReport)> {
    let scored = score_test_split(ckpt, manifest, opts.weights)?;
    let report = EvalReport::from_scores(&scored, opts.p, opts.summary_over_ids)?;
    Ok((scored, report))
}

/// Writes `scores.csv`, `report.csv` and `report.json` under `out_dir`.
pub fn write_eval_outputs(scored: &[ScoredClip], report: &EvalReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let create = |name: &str| {
        let p = out_dir.join(name);
        std::fs::File::create(&p).map_err(|e| Error::io(format!("creating {}", p.display()), e))
    };
    write_scores_csv(scored, create(SCORES_FILE)?)?;
    report.write_csv(create(REPORT_CSV_FILE)?)?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    create(REPORT_JSON_FILE)?
        .write_all(json.as_bytes())
        .map_err(|e| Error::io("writing report json", e))
}
