//! CSV tables for locations, ground truth and scores.
//!
//! Floats are written with 9 significant digits and rows are sorted by
//! frame, then `x`, then `z`, so equal inputs give byte-identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::cluster::MBLocation;
use crate::error::{Error, Result};
use crate::eval::FrameScore;
use crate::types::{GroundTruthScene, Vec2};

pub const LOCATION_HEADER: [&str; 5] = ["frame_id", "x_m", "z_m", "support", "spread_m"];
pub const TRUTH_HEADER: [&str; 4] = ["frame_id", "x_m", "z_m", "amplitude"];
pub const SCORE_HEADER: [&str; 5] = ["frame_id", "true_positives", "false_positives", "false_negatives", "rmse_m"];

/// Nine significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.8e}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationRecord {
    pub frame_id: u64,
    pub position: Vec2,
    pub support: usize,
    pub spread: f64,
}

impl LocationRecord {
    pub fn new(frame_id: u64, loc: &MBLocation) -> Self {
        Self { frame_id, position: loc.position, support: loc.support, spread: loc.spread }
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn sort_key(a: &(u64, Vec2), b: &(u64, Vec2)) -> std::cmp::Ordering {
    a.0.cmp(&b.0).then(a.1.x.total_cmp(&b.1.x)).then(a.1.y.total_cmp(&b.1.y))
}

fn write_table<W: Write>(out: W, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::CorruptStream(e.to_string()))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn check_header<R: Read>(r: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let got = r.headers().map_err(csv_error)?;
    if got.iter().ne(expected.iter().copied()) {
        return Err(Error::Format(format!("expected columns {expected:?}, found {:?}", got.iter().collect::<Vec<_>>())));
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Format(format!("non-finite {what}: {v}")))
    }
}

pub fn write_locations_to<W: Write>(out: W, records: &[LocationRecord]) -> Result<()> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| sort_key(&(a.frame_id, a.position), &(b.frame_id, b.position)));
    write_table(
        out,
        &LOCATION_HEADER,
        sorted.iter().map(|r| {
            vec![
                r.frame_id.to_string(),
                format_float(r.position.x),
                format_float(r.position.y),
                r.support.to_string(),
                format_float(r.spread),
            ]
        }),
    )
}

pub fn write_locations(path: &Path, records: &[LocationRecord]) -> Result<()> {
    write_locations_to(create(path)?, records)
}

#[derive(Deserialize)]
struct LocationRow {
    frame_id: u64,
    x_m: f64,
    z_m: f64,
    support: usize,
    spread_m: f64,
}

pub fn read_locations_from<R: Read>(input: R) -> Result<Vec<LocationRecord>> {
    let mut r = csv::Reader::from_reader(input);
    check_header(&mut r, &LOCATION_HEADER)?;
    r.deserialize::<LocationRow>()
        .map(|row| {
            let row = row.map_err(csv_error)?;
            Ok(LocationRecord {
                frame_id: row.frame_id,
                position: Vec2::new(finite(row.x_m, "x_m")?, finite(row.z_m, "z_m")?),
                support: row.support,
                spread: finite(row.spread_m, "spread_m")?,
            })
        })
        .collect()
}

pub fn read_locations(path: &Path) -> Result<Vec<LocationRecord>> {
    read_locations_from(open(path)?)
}

/// Frames without bubbles are kept as a row with empty position and
/// amplitude so the frame still counts during evaluation.
pub fn write_truth_to<W: Write>(out: W, scenes: &[GroundTruthScene]) -> Result<()> {
    let mut rows: Vec<(u64, Vec2, Option<f64>)> = Vec::new();
    for s in scenes {
        if s.is_empty() {
            rows.push((s.frame_id, Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY), None));
        }
        rows.extend(s.positions.iter().zip(&s.amplitudes).map(|(p, &a)| (s.frame_id, *p, Some(a))));
    }
    rows.sort_by(|a, b| sort_key(&(a.0, a.1), &(b.0, b.1)));
    write_table(
        out,
        &TRUTH_HEADER,
        rows.into_iter().map(|(f, p, a)| match a {
            Some(a) => vec![f.to_string(), format_float(p.x), format_float(p.y), format_float(a)],
            None => vec![f.to_string(), String::new(), String::new(), String::new()],
        }),
    )
}

pub fn write_truth(path: &Path, scenes: &[GroundTruthScene]) -> Result<()> {
    write_truth_to(create(path)?, scenes)
}

#[derive(Deserialize)]
struct TruthRow {
    frame_id: u64,
    x_m: Option<f64>,
    z_m: Option<f64>,
    amplitude: Option<f64>,
}

/// Scenes ordered by frame id.
pub fn read_truth_from<R: Read>(input: R) -> Result<Vec<GroundTruthScene>> {
    let mut r = csv::Reader::from_reader(input);
    check_header(&mut r, &TRUTH_HEADER)?;
    let mut frames: BTreeMap<u64, (Vec<Vec2>, Vec<f64>, bool)> = BTreeMap::new();
    for row in r.deserialize::<TruthRow>() {
        let row = row.map_err(csv_error)?;
        let entry = frames.entry(row.frame_id).or_default();
        match (row.x_m, row.z_m, row.amplitude) {
            (None, None, None) => entry.2 = true,
            (Some(x), Some(z), Some(a)) => {
                entry.0.push(Vec2::new(finite(x, "x_m")?, finite(z, "z_m")?));
                entry.1.push(finite(a, "amplitude")?);
            }
            _ => return Err(Error::Format(format!("frame {}: partially empty truth row", row.frame_id))),
        }
    }
    frames
        .into_iter()
        .map(|(id, (p, a, empty))| {
            if empty && !p.is_empty() {
                return Err(Error::Format(format!("frame {id} is marked empty but has bubbles")));
            }
            GroundTruthScene::new(id, p, a)
        })
        .collect()
}

pub fn read_truth(path: &Path) -> Result<Vec<GroundTruthScene>> {
    read_truth_from(open(path)?)
}

pub fn write_scores_to<W: Write>(out: W, scores: &[FrameScore]) -> Result<()> {
    let mut sorted = scores.to_vec();
    sorted.sort_by_key(|s| s.frame_id);
    write_table(
        out,
        &SCORE_HEADER,
        sorted.iter().map(|s| {
            vec![
                s.frame_id.to_string(),
                s.true_positives.to_string(),
                s.false_positives.to_string(),
                s.false_negatives.to_string(),
                s.rmse.map(format_float).unwrap_or_default(),
            ]
        }),
    )
}

pub fn write_scores(path: &Path, scores: &[FrameScore]) -> Result<()> {
    write_scores_to(create(path)?, scores)
}

#[derive(Deserialize)]
struct ScoreRow {
    frame_id: u64,
    true_positives: usize,
    false_positives: usize,
    false_negatives: usize,
    rmse_m: Option<f64>,
}

pub fn read_scores_from<R: Read>(input: R) -> Result<Vec<FrameScore>> {
    let mut r = csv::Reader::from_reader(input);
    check_header(&mut r, &SCORE_HEADER)?;
    r.deserialize::<ScoreRow>()
        .map(|row| {
            let row = row.map_err(csv_error)?;
            if row.rmse_m.is_some() != (row.true_positives > 0) {
                return Err(Error::Format(format!("frame {}: rmse present iff true positives exist", row.frame_id)));
            }
            Ok(FrameScore {
                frame_id: row.frame_id,
                true_positives: row.true_positives,
                false_positives: row.false_positives,
                false_negatives: row.false_negatives,
                rmse: row.rmse_m.map(|v| finite(v, "rmse_m")).transpose()?,
            })
        })
        .collect()
}

pub fn read_scores(path: &Path) -> Result<Vec<FrameScore>> {
    read_scores_from(open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(frame_id: u64, x: f64, z: f64) -> LocationRecord {
        LocationRecord { frame_id, position: Vec2::new(x, z), support: 4, spread: 1.25e-6 }
    }

    fn to_string(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> String {
        let mut buf = Vec::new();
        f(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn empty_list_is_header_only() {
        let s = to_string(|b| write_locations_to(b, &[]));
        assert_eq!(s, "frame_id,x_m,z_m,support,spread_m\n");
        assert!(read_locations_from(s.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn locations_round_trip() {
        let records = vec![rec(0, -1.234567891e-3, 1.0e-2), rec(2, 5.5e-4, 9.87654321e-3)];
        let s = to_string(|b| write_locations_to(b, &records));
        assert!(s.contains("-1.23456789e-3"), "{s}");
        let back = read_locations_from(s.as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.frame_id, b.frame_id);
            assert_eq!(a.support, b.support);
            assert!((a.position - b.position).norm() < 1e-8 * a.position.norm());
        }
    }

    #[test]
    fn ordering_independent_of_input_order() {
        let a = rec(1, 2e-4, 1e-2);
        let b = rec(1, -3e-4, 1.1e-2);
        let c = rec(0, 9e-4, 8e-3);
        let first = to_string(|w| write_locations_to(w, &[a, b, c]));
        for perm in [[b, c, a], [c, a, b], [a, c, b]] {
            assert_eq!(to_string(|w| write_locations_to(w, &perm)), first);
        }
        let lines: Vec<&str> = first.lines().collect();
        assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,-3") && lines[3].starts_with("1,2"));
    }

    #[test]
    fn truth_keeps_empty_frames() {
        let scenes = vec![
            GroundTruthScene::new(0, vec![], vec![]).unwrap(),
            GroundTruthScene::new(1, vec![Vec2::new(1e-3, 1e-2)], vec![0.75]).unwrap(),
        ];
        let s = to_string(|w| write_truth_to(w, &scenes));
        let back = read_truth_from(s.as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].is_empty());
        assert_eq!(back[1].amplitudes, vec![0.75]);
    }

    #[test]
    fn scores_round_trip() {
        let scores = vec![
            FrameScore { frame_id: 3, true_positives: 0, false_positives: 1, false_negatives: 2, rmse: None },
            FrameScore { frame_id: 1, true_positives: 4, false_positives: 0, false_negatives: 1, rmse: Some(2.5e-6) },
        ];
        let s = to_string(|w| write_scores_to(w, &scores));
        let back = read_scores_from(s.as_bytes()).unwrap();
        assert_eq!(back[0], scores[1]);
        assert_eq!(back[1], scores[0]);
    }

    #[test]
    fn malformed_input_rejected() {
        for text in [
            "frame,x,z,support,spread\n",
            "frame_id,x_m,z_m,support,spread_m\n0,abc,1,2,3\n",
            "frame_id,x_m,z_m,support,spread_m\n0,1,2\n",
            "frame_id,x_m,z_m,support,spread_m\n0,NaN,1,2,3\n",
            "frame_id,x_m,z_m,support,spread_m\n-1,0,1,2,3\n",
        ] {
            assert!(matches!(read_locations_from(text.as_bytes()), Err(Error::Format(_))), "{text}");
        }
        let partial = "frame_id,x_m,z_m,amplitude\n0,1e-3,,1\n";
        assert!(read_truth_from(partial.as_bytes()).is_err());
    }
}
