//! Visual-embedding export, 2-D projection, min-max normalization,
//! separability scoring and CSV/SVG plots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avcorpus::{hex_digest, stable_seed, Corpus, Group, Split};
use crate::container::{NamedTensor, TensorContainer};
use crate::error::{Error, Result};
use crate::sepnet::{EmbeddingTag, ModelVariant, SeparationModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub speaker_id: String,
    pub group: Group,
    pub utt_id: String,
    pub frame_index: usize,
    #[serde(skip)]
    pub features: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub model_variant: ModelVariant,
    pub model_digest: String,
    pub tag: EmbeddingTag,
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingDump {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.speaker_id.as_str()).collect()
    }

    /// One record per utterance holding the mean over its frames.
    pub fn utterance_means(&self) -> EmbeddingDump {
        let mut order: Vec<&str> = Vec::new();
        let mut sums: BTreeMap<&str, (&EmbeddingRecord, Vec<f64>, usize)> = BTreeMap::new();
        for r in &self.records {
            let e = sums.entry(&r.utt_id).or_insert_with(|| {
                order.push(&r.utt_id);
                (r, vec![0.0; self.dim], 0)
            });
            for (s, &v) in e.1.iter_mut().zip(&r.features) {
                *s += v as f64;
            }
            e.2 += 1;
        }
        let records = order
            .into_iter()
            .map(|u| {
                let (r, s, n) = &sums[u];
                EmbeddingRecord {
                    speaker_id: r.speaker_id.clone(),
                    group: r.group,
                    utt_id: r.utt_id.clone(),
                    frame_index: 0,
                    features: s.iter().map(|v| (v / *n as f64) as f32).collect(),
                }
            })
            .collect();
        EmbeddingDump { records, ..self.clone_header() }
    }

    fn clone_header(&self) -> EmbeddingDump {
        EmbeddingDump {
            model_variant: self.model_variant,
            model_digest: self.model_digest.clone(),
            tag: self.tag,
            dim: self.dim,
            records: Vec::new(),
        }
    }

    fn index_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the `[R, N]` feature matrix to `path` (tensor container) and the
    /// record index next to it as `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = TensorContainer::new();
        let data: Vec<f32> = self.records.iter().flat_map(|r| r.features.iter().copied()).collect();
        file.push(NamedTensor::f32("features", &[self.records.len(), self.dim], data));
        file.save(path)?;
        fs::write(Self::index_path(path), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut dump: EmbeddingDump = serde_json::from_str(&fs::read_to_string(Self::index_path(path))?)?;
        let features = TensorContainer::load(path)?.require("features")?.to_tensor()?;
        if features.shape() != [dump.records.len(), dump.dim] {
            return Err(Error::Format(format!(
                "embedding matrix {:?} does not match {} records of dim {}",
                features.shape(),
                dump.records.len(),
                dump.dim
            )));
        }
        for (r, row) in dump.records.iter_mut().zip(features.data().chunks(dump.dim.max(1))) {
            r.features = row.to_vec();
        }
        Ok(dump)
    }
}

/// V for every frame of every test utterance of `n_speakers` test speakers
/// drawn with `seed`. Records are ordered by speaker id, utterance, frame.
pub fn export_embeddings(model: &SeparationModel, corpus: &Corpus, n_speakers: usize, seed: u64) -> Result<EmbeddingDump> {
    let mut available: Vec<&str> = corpus.split_speakers(Split::Test).iter().map(|s| s.speaker_id.as_str()).collect();
    if n_speakers > available.len() {
        return Err(Error::Config(format!("{n_speakers} speakers requested, {} test speakers available", available.len())));
    }
    available.sort_unstable();
    available.shuffle(&mut ChaCha8Rng::seed_from_u64(stable_seed(seed, "embed", "speakers")));
    let chosen: BTreeSet<&str> = available.into_iter().take(n_speakers).collect();
    let mut dump = EmbeddingDump {
        model_variant: model.variant(),
        model_digest: hex_digest(&model.to_bytes()?),
        tag: EmbeddingTag::V,
        dim: model.config.extractor_visual_dim(),
        records: Vec::new(),
    };
    let mut utts: Vec<_> = corpus.manifest.split(Split::Test).filter(|r| chosen.contains(r.speaker_id.as_str())).collect();
    utts.sort_by(|a, b| (&a.speaker_id, &a.utt_id).cmp(&(&b.speaker_id, &b.utt_id)));
    for rec in utts {
        let utt = corpus.utterance(&rec.utt_id).ok_or_else(|| Error::State(format!("utterance {} missing", rec.utt_id)))?;
        let v = model.embedding(&utt.video)?;
        for (t, row) in v.features.data().chunks(v.dim()).enumerate() {
            dump.records.push(EmbeddingRecord {
                speaker_id: rec.speaker_id.clone(),
                group: utt.group,
                utt_id: rec.utt_id.clone(),
                frame_index: t,
                features: row.to_vec(),
            });
        }
    }
    Ok(dump)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and column eigenvectors (row-major `n × n`).
fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Top-2 principal directions of the centred rows; each direction is signed
/// so that its largest-magnitude loading is positive.
pub fn principal_axes<R: AsRef<[f32]>>(rows: &[R]) -> Result<(Vec<f64>, [Vec<f64>; 2])> {
    let n = rows.first().map_or(0, |r| r.as_ref().len());
    if rows.len() < 2 || n == 0 {
        return Err(Error::DegenerateVariance);
    }
    if rows.iter().any(|r| r.as_ref().len() != n) {
        return Err(Error::Shape("embedding rows differ in length".into()));
    }
    let m = rows.len() as f64;
    let mut mean = vec![0.0; n];
    for r in rows {
        for (s, &x) in mean.iter_mut().zip(r.as_ref()) {
            *s += x as f64 / m;
        }
    }
    let mut cov = vec![0.0; n * n];
    let mut c = vec![0.0; n];
    for r in rows {
        for (k, (&x, mu)) in r.as_ref().iter().zip(&mean).enumerate() {
            c[k] = x as f64 - mu;
        }
        for i in 0..n {
            if c[i] == 0.0 {
                continue;
            }
            for j in i..n {
                cov[i * n + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            cov[i * n + j] = cov[j * n + i];
        }
    }
    let total: f64 = (0..n).map(|i| cov[i * n + i]).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let (vals, vecs) = symmetric_eigen(cov, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        let col = order.get(k).copied();
        let mut d: Vec<f64> = match col {
            Some(col) => (0..n).map(|i| vecs[i * n + col]).collect(),
            None => vec![0.0; n],
        };
        let lead = d.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            d.iter_mut().for_each(|x| *x = -*x);
        }
        d
    };
    Ok((mean, [axis(0), axis(1)]))
}

/// Coordinates of each row on the top-2 principal directions.
pub fn project_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Vec<[f64; 2]>> {
    let (mean, [a, b]) = principal_axes(rows)?;
    Ok(rows
        .iter()
        .map(|r| {
            let (mut x, mut y) = (0.0, 0.0);
            for (k, &v) in r.as_ref().iter().enumerate() {
                let c = v as f64 - mean[k];
                x += c * a[k];
                y += c * b.get(k).copied().unwrap_or(0.0);
            }
            [x, y]
        })
        .collect())
}

pub fn project_2d(dump: &EmbeddingDump) -> Result<Vec<[f64; 2]>> {
    let rows: Vec<&[f32]> = dump.records.iter().map(|r| r.features.as_slice()).collect();
    project_rows(&rows)
}

/// Per-axis `(x - min) / (max - min)`; a zero-range axis maps to 0.
pub fn minmax_norm(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    points
        .iter()
        .map(|p| {
            let mut q = [0.0; 2];
            for a in 0..2 {
                let range = hi[a] - lo[a];
                q[a] = if range > 0.0 { ((p[a] - lo[a]) / range).clamp(0.0, 1.0) } else { 0.0 };
            }
            q
        })
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient under Euclidean distance. Points alone in
/// their cluster score 0; a point with `max(a, b) = 0` scores 0.
pub fn silhouette<P: AsRef<[f64]>, L: Ord>(points: &[P], labels: &[L]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!("{} points but {} labels", points.len(), labels.len())));
    }
    let mut ids: BTreeMap<&L, usize> = BTreeMap::new();
    for l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    let k = ids.len();
    if k < 2 {
        return Err(Error::SingleCluster);
    }
    let lab: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
    let mut sizes = vec![0usize; k];
    for &l in &lab {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..points.len() {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..points.len() {
            if i != j {
                sums[lab[j]] += euclid(points[i].as_ref(), points[j].as_ref());
            }
        }
        let own = lab[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k).filter(|&c| c != own).map(|c| sums[c] / sizes[c] as f64).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotPoint {
    pub speaker_id: String,
    pub group: Group,
    pub x: f64,
    pub y: f64,
}

pub fn plot_points(dump: &EmbeddingDump, normalized: &[[f64; 2]]) -> Vec<PlotPoint> {
    dump.records
        .iter()
        .zip(normalized)
        .map(|(r, p)| PlotPoint { speaker_id: r.speaker_id.clone(), group: r.group, x: p[0], y: p[1] })
        .collect()
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn marker(group: Group, cx: f64, cy: f64, color: &str) -> String {
    match group {
        Group::Low => format!("<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.6\"/>"),
        Group::High => format!(
            "<path d=\"M{:.2} {:.2}L{:.2} {:.2}L{:.2} {:.2}Z\" fill=\"{color}\" fill-opacity=\"0.6\"/>",
            cx,
            cy - 3.0,
            cx - 2.8,
            cy + 2.2,
            cx + 2.8,
            cy + 2.2
        ),
    }
}

/// Writes `{stem}.csv` and `{stem}.svg`; returns both paths.
pub fn emit_plot(points: &[PlotPoint], stem: &Path, title: &str) -> Result<(PathBuf, PathBuf)> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut csv = String::from("speaker_id,group,x,y\n");
    for p in points {
        writeln!(csv, "{},{},{:.6},{:.6}", p.speaker_id, p.group.as_str(), p.x, p.y).unwrap();
    }
    let speakers: BTreeSet<&str> = points.iter().map(|p| p.speaker_id.as_str()).collect();
    let color: BTreeMap<&str, &str> = speakers.iter().enumerate().map(|(i, s)| (*s, PALETTE[i % PALETTE.len()])).collect();
    let (size, pad, legend) = (400.0, 20.0, 110.0);
    let mut svg = String::new();
    writeln!(svg, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>").unwrap();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">",
        w = size + 2.0 * pad + legend,
        h = size + 2.0 * pad + 20.0
    )
    .unwrap();
    writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").unwrap();
    writeln!(svg, "<text x=\"{pad}\" y=\"14\" font-family=\"sans-serif\" font-size=\"12\">{}</text>", xml_escape(title)).unwrap();
    writeln!(svg, "<rect x=\"{pad}\" y=\"{}\" width=\"{size}\" height=\"{size}\" fill=\"none\" stroke=\"black\"/>", pad + 20.0).unwrap();
    for p in points {
        let cx = pad + p.x * size;
        let cy = pad + 20.0 + (1.0 - p.y) * size;
        writeln!(svg, "{}", marker(p.group, cx, cy, color[p.speaker_id.as_str()])).unwrap();
    }
    for (i, s) in speakers.iter().enumerate() {
        let y = pad + 30.0 + 16.0 * i as f64;
        let group = points.iter().find(|p| p.speaker_id == *s).map_or(Group::Low, |p| p.group);
        let x = size + 2.0 * pad;
        writeln!(svg, "{}", marker(group, x, y - 4.0, color[s])).unwrap();
        writeln!(svg, "<text x=\"{}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\">{} ({})</text>", x + 8.0, xml_escape(s), group.as_str()).unwrap();
    }
    writeln!(svg, "</svg>").unwrap();
    let (csv_path, svg_path) = (stem.with_extension("csv"), stem.with_extension("svg"));
    fs::write(&csv_path, csv)?;
    fs::write(&svg_path, svg)?;
    Ok((csv_path, svg_path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VizSummary {
    pub model_variant: ModelVariant,
    pub seed: u64,
    pub speakers: usize,
    pub frame_points: usize,
    pub frame_silhouette: f64,
    pub utterance_points: usize,
    pub utterance_silhouette: f64,
}

/// Projects and normalizes one model's dump (frame level and utterance
/// means), writes `{stem}_frames.*` and `{stem}_utts.*`, and scores both.
pub fn visualize(dump: &EmbeddingDump, stem: &Path, seed: u64) -> Result<VizSummary> {
    let name = stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut scores = Vec::new();
    for (suffix, d) in [("frames", dump.clone()), ("utts", dump.utterance_means())] {
        let norm = minmax_norm(&project_2d(&d)?);
        let score = silhouette(&norm, &d.labels())?;
        let title = format!("{} V, {} ({suffix}), silhouette {score:.3}", dump.model_variant, d.len());
        emit_plot(&plot_points(&d, &norm), &stem.with_file_name(format!("{name}_{suffix}")), &title)?;
        scores.push((d.len(), score));
    }
    Ok(VizSummary {
        model_variant: dump.model_variant,
        seed,
        speakers: dump.records.iter().map(|r| &r.speaker_id).collect::<BTreeSet<_>>().len(),
        frame_points: scores[0].0,
        frame_silhouette: scores[0].1,
        utterance_points: scores[1].0,
        utterance_silhouette: scores[1].1,
    })
}
