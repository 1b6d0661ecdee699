//! JSON-lines exchange files for evaluation.
//!
//! One record per line: `{id, mask_path, grasps: [{cx, cy, w, h, theta, score}]}`.
//! `mask_path` is `<container>#<block index>`, relative to the JSON-lines
//! file's directory.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::ContainerReader;
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, GraspRect, ScoredGrasp};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeGrasp {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    pub score: f64,
}

impl From<ScoredGrasp> for ExchangeGrasp {
    fn from(g: ScoredGrasp) -> Self {
        ExchangeGrasp {
            cx: g.rect.cx,
            cy: g.rect.cy,
            w: g.rect.width,
            h: g.rect.height,
            theta: g.rect.theta,
            score: g.score,
        }
    }
}

impl ExchangeGrasp {
    pub fn to_scored(self) -> Result<ScoredGrasp> {
        Ok(ScoredGrasp {
            rect: GraspRect::new(self.cx, self.cy, self.w, self.h, self.theta)?,
            score: self.score,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeRecord {
    pub id: String,
    pub mask_path: String,
    pub grasps: Vec<ExchangeGrasp>,
}

pub fn mask_ref(container_name: &str, index: usize) -> String {
    format!("{container_name}#{index}")
}

fn split_ref(r: &str) -> Result<(&str, usize)> {
    let (path, idx) = r
        .rsplit_once('#')
        .ok_or_else(|| Error::Format(format!("mask_path '{r}' lacks '#<index>'")))?;
    let idx = idx.parse().map_err(|_| Error::Format(format!("mask_path '{r}' has a bad index")))?;
    Ok((path, idx))
}

pub fn write_jsonl(path: &Path, records: &[ExchangeRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ExchangeRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Reads a JSON-lines file and resolves every mask through its container.
pub fn load_eval_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut readers: HashMap<PathBuf, ContainerReader> = HashMap::new();
    read_jsonl(path)?
        .into_iter()
        .map(|r| {
            let (file, idx) = split_ref(&r.mask_path)?;
            let full = base.join(file);
            if !readers.contains_key(&full) {
                let reader = ContainerReader::open(&full)?;
                readers.insert(full.clone(), reader);
            }
            let (_, mask) = readers[&full].mask(idx)?;
            Ok(EvalRecord {
                id: r.id,
                mask,
                grasps: r.grasps.into_iter().map(ExchangeGrasp::to_scored).collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::container::{write_container, write_dataset, MaskRecord};
    use crate::data::scene::{generate_dataset, Difficulty, SceneConfig};
    use crate::metrics::{evaluate, SegMask};
    use crate::Exec;

    #[test]
    fn ground_truth_evaluates_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(&Exec::sequential(), 9, 4, Difficulty::Isolated, &SceneConfig::default()).unwrap();
        write_dataset(&dir.path().join("d.glg"), &samples).unwrap();
        let recs: Vec<ExchangeRecord> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| ExchangeRecord {
                id: s.id.to_string(),
                mask_path: mask_ref("d.glg", i),
                grasps: s.grasps.iter().map(|&rect| ScoredGrasp { rect, score: 1.0 }.into()).collect(),
            })
            .collect();
        let p = dir.path().join("gt.jsonl");
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), recs);
        let gt = load_eval_records(&p).unwrap();
        let r = evaluate(&gt, &gt, 3).unwrap();
        assert_eq!((r.mean_iou, r.j_at_1, r.j_at_n), (1.0, 1.0, 1.0));
    }

    #[test]
    fn separate_prediction_container() {
        let dir = tempfile::tempdir().unwrap();
        let masks = vec![MaskRecord {
            id: "7".into(),
            mask: SegMask::from_fn(4, 4, |y, _| y < 2),
        }];
        write_container(&dir.path().join("p.glg"), &masks, &Default::default(), None).unwrap();
        let p = dir.path().join("p.jsonl");
        std::fs::write(&p, "{\"id\":\"7\",\"mask_path\":\"p.glg#0\",\"grasps\":[{\"cx\":1,\"cy\":1,\"w\":2,\"h\":1,\"theta\":190,\"score\":0.5}]}\n").unwrap();
        let r = load_eval_records(&p).unwrap();
        assert_eq!(r[0].mask, masks[0].mask);
        assert_eq!(r[0].grasps[0].rect.theta, 10.0);
    }

    #[test]
    fn malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, "{\"id\":\"1\",\"mask_path\":\"a#0\",\"grasps\":[],\"extra\":1}\n").unwrap();
        assert!(matches!(read_jsonl(&p), Err(Error::Format(_))));
        assert!(split_ref("nohash").is_err());
        assert_eq!(split_ref("a#b.glg#3").unwrap(), ("a#b.glg", 3));
    }
}
