//! On-disk formats.
//!
//! Feature files (`.aeif`): the 4 magic bytes `AEIF`, a version byte, a
//! little-endian `u32` header length, a UTF-8 header of `key=value` lines
//! (`video_id`, `snippets`, `delta`, `env_dim`, `actor_dim`, and
//! comma-separated `actor_counts`), then little-endian `f32` values: all
//! environment rows, followed by the actor rows of each snippet in order.
//!
//! Annotation and proposal files are UTF-8, one tab-separated record per
//! line. Annotations: `video_id start end [label]`; every video must also be
//! declared once by a `#video<TAB>id<TAB>num_frames<TAB>frame_rate` line.
//! Proposals: `video_id start end score [label]`. Other lines starting with
//! `#` and blank lines are ignored.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ActionSegment, DataError, SnippetFeatures, VideoRecord};
use crate::postproc::Proposal;

pub const FEATURE_MAGIC: &[u8; 4] = b"AEIF";
pub const FEATURE_VERSION: u8 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_features(f: &SnippetFeatures) -> Result<Vec<u8>, DataError> {
    f.validate()?;
    if f.video_id.contains(['\n', '=']) {
        return Err(DataError::InvalidArgument(format!(
            "video id {:?} cannot contain newlines or '='",
            f.video_id
        )));
    }
    let counts: Vec<String> = f.actor_counts.iter().map(ToString::to_string).collect();
    let header = format!(
        "video_id={}\nsnippets={}\ndelta={}\nenv_dim={}\nactor_dim={}\nactor_counts={}\n",
        f.video_id,
        f.num_snippets(),
        f.delta,
        f.env_dim,
        f.actor_dim,
        counts.join(",")
    );
    let mut out = Vec::with_capacity(9 + header.len() + 4 * (f.env.len() + f.actors.len()));
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(FEATURE_VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in f.env.iter().chain(&f.actors) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], location: &str) -> Result<SnippetFeatures, DataError> {
    let perr = |field: &str, msg: &str| DataError::parse(location, field, msg);
    if bytes.len() < 9 || &bytes[..4] != FEATURE_MAGIC {
        return Err(perr("magic", "expected AEIF"));
    }
    if bytes[4] != FEATURE_VERSION {
        return Err(perr("version", &format!("unsupported version {}", bytes[4])));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let header = bytes
        .get(9..9 + hlen)
        .ok_or_else(|| perr("header", "truncated header"))?;
    let header = std::str::from_utf8(header).map_err(|_| perr("header", "not UTF-8"))?;
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| perr("header", &format!("line {line:?} is not key=value")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| perr(k, "missing"));
    let num = |k: &str| -> Result<usize, DataError> {
        let raw = get(k)?;
        raw.parse::<usize>()
            .map_err(|_| perr(k, &format!("expected a non-negative integer, got {raw:?}")))
    };
    let video_id = get("video_id")?.to_string();
    let snippets = num("snippets")?;
    let delta = num("delta")?;
    let env_dim = num("env_dim")?;
    let actor_dim = num("actor_dim")?;
    let raw_counts = get("actor_counts")?;
    let actor_counts: Vec<usize> = if raw_counts.is_empty() {
        Vec::new()
    } else {
        raw_counts
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<usize>()
                    .map_err(|_| perr("actor_counts", &format!("expected a non-negative integer, got {c:?}")))
            })
            .collect::<Result<_, _>>()?
    };
    if delta == 0 {
        return Err(perr("delta", "must be positive"));
    }
    if actor_counts.len() != snippets {
        return Err(DataError::DimensionMismatch {
            context: format!("{location}: actor_counts entries vs snippets"),
            expected: snippets,
            found: actor_counts.len(),
        });
    }
    let payload = &bytes[9 + hlen..];
    if !payload.len().is_multiple_of(4) {
        return Err(perr("payload", "length is not a multiple of 4"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let n_env = snippets * env_dim;
    let n_act: usize = actor_counts.iter().sum::<usize>() * actor_dim;
    if values.len() != n_env + n_act {
        return Err(DataError::DimensionMismatch {
            context: format!("{location}: payload floats for the declared dimensions"),
            expected: n_env + n_act,
            found: values.len(),
        });
    }
    let f = SnippetFeatures {
        video_id,
        delta,
        env_dim,
        actor_dim,
        env: values[..n_env].to_vec(),
        actor_counts,
        actors: values[n_env..].to_vec(),
    };
    f.validate()?;
    Ok(f)
}

pub fn write_features(path: impl AsRef<Path>, f: &SnippetFeatures) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, encode_features(f)?).map_err(io_err(path))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<SnippetFeatures, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes, &path.display().to_string())
}

fn check_id(id: &str) -> Result<(), DataError> {
    if id.is_empty() || id.contains(['\t', '\n']) || id.starts_with('#') {
        return Err(DataError::InvalidArgument(format!("unusable video id {id:?}")));
    }
    Ok(())
}

fn check_label(label: &Option<String>) -> Result<(), DataError> {
    match label {
        Some(l) if l.is_empty() || l.contains(['\t', '\n']) => {
            Err(DataError::InvalidArgument(format!("unusable label {l:?}")))
        }
        _ => Ok(()),
    }
}

pub fn format_annotations(records: &[VideoRecord]) -> Result<String, DataError> {
    let mut out = String::new();
    for r in records {
        check_id(&r.video_id)?;
        writeln!(out, "#video\t{}\t{}\t{}", r.video_id, r.num_frames, r.frame_rate).expect("string write");
    }
    for r in records {
        for s in &r.annotations {
            check_label(&s.label)?;
            write!(out, "{}\t{}\t{}", r.video_id, s.start, s.end).expect("string write");
            if let Some(l) = &s.label {
                write!(out, "\t{l}").expect("string write");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_annotations(path: impl AsRef<Path>, records: &[VideoRecord]) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, format_annotations(records)?).map_err(io_err(path))
}

fn parse_f64(raw: &str, location: &str, field: &str) -> Result<f64, DataError> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DataError::parse(location, field, format!("expected a finite number, got {raw:?}")))
}

/// Parses annotation text; `source` names the input in error messages.
pub fn parse_annotations(text: &str, source: &str) -> Result<Vec<VideoRecord>, DataError> {
    let mut order: Vec<String> = Vec::new();
    let mut videos: HashMap<String, VideoRecord> = HashMap::new();
    let mut pending: Vec<(String, ActionSegment, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let loc = format!("{source}:{}", n + 1);
        let cols: Vec<&str> = line.split('\t').collect();
        if cols[0] == "#video" {
            if cols.len() != 4 {
                return Err(DataError::parse(&loc, "#video", "expected id, num_frames, frame_rate"));
            }
            let frames_raw = cols[2].trim();
            let num_frames = frames_raw.parse::<i64>().map_err(|_| {
                DataError::parse(&loc, "num_frames", format!("expected an integer, got {frames_raw:?}"))
            })?;
            if num_frames <= 0 {
                return Err(DataError::parse(&loc, "num_frames", "must be positive"));
            }
            let frame_rate = parse_f64(cols[3], &loc, "frame_rate")?;
            if frame_rate <= 0.0 {
                return Err(DataError::parse(&loc, "frame_rate", "must be positive"));
            }
            let id = cols[1].to_string();
            if videos.contains_key(&id) {
                return Err(DataError::parse(&loc, "video_id", format!("{id:?} declared twice")));
            }
            order.push(id.clone());
            videos.insert(
                id.clone(),
                VideoRecord {
                    video_id: id,
                    num_frames: num_frames as u64,
                    frame_rate,
                    annotations: Vec::new(),
                },
            );
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !(3..=4).contains(&cols.len()) {
            return Err(DataError::parse(
                &loc,
                "record",
                format!("expected 3 or 4 tab-separated fields, got {}", cols.len()),
            ));
        }
        let start = parse_f64(cols[1], &loc, "start_seconds")?;
        let end = parse_f64(cols[2], &loc, "end_seconds")?;
        if !(start >= 0.0 && start < end) {
            return Err(DataError::parse(
                &loc,
                "end_seconds",
                format!("[{start}, {end}] is not a valid interval"),
            ));
        }
        let mut seg = ActionSegment::new(start, end);
        if let Some(l) = cols.get(3).filter(|l| !l.is_empty()) {
            seg = seg.with_label(*l);
        }
        pending.push((cols[0].to_string(), seg, loc));
    }
    for (id, seg, loc) in pending {
        let rec = videos
            .get_mut(&id)
            .ok_or_else(|| DataError::parse(&loc, "video_id", format!("{id:?} has no #video declaration")))?;
        if seg.end > rec.duration() + 1e-9 {
            log::warn!("{loc}: segment ends after the video ({} s)", rec.duration());
        }
        rec.annotations.push(seg);
    }
    Ok(order
        .into_iter()
        .map(|id| videos.remove(&id).expect("declared"))
        .collect())
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<VideoRecord>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_annotations(&text, &path.display().to_string())
}

pub fn format_proposals(proposals: &[Proposal]) -> Result<String, DataError> {
    let mut out = String::new();
    for p in proposals {
        check_id(&p.video_id)?;
        check_label(&p.label)?;
        write!(out, "{}\t{}\t{}\t{}", p.video_id, p.start, p.end, p.score).expect("string write");
        if let Some(l) = &p.label {
            write!(out, "\t{l}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_proposals(path: impl AsRef<Path>, proposals: &[Proposal]) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, format_proposals(proposals)?).map_err(io_err(path))
}

/// Parses proposal text, grouped by video id.
pub fn parse_proposals(text: &str, source: &str) -> Result<BTreeMap<String, Vec<Proposal>>, DataError> {
    let mut out: BTreeMap<String, Vec<Proposal>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = format!("{source}:{}", n + 1);
        let cols: Vec<&str> = line.split('\t').collect();
        if !(4..=5).contains(&cols.len()) {
            return Err(DataError::parse(
                &loc,
                "record",
                format!("expected 4 or 5 tab-separated fields, got {}", cols.len()),
            ));
        }
        let start = parse_f64(cols[1], &loc, "start_seconds")?;
        let end = parse_f64(cols[2], &loc, "end_seconds")?;
        let score = parse_f64(cols[3], &loc, "score")?;
        if start >= end {
            return Err(DataError::parse(&loc, "end_seconds", "must exceed start_seconds"));
        }
        if score < 0.0 {
            return Err(DataError::parse(&loc, "score", "must be non-negative"));
        }
        let mut p = Proposal::new(cols[0], start, end, score);
        if let Some(l) = cols.get(4).filter(|l| !l.is_empty()) {
            p = p.with_label(*l);
        }
        out.entry(cols[0].to_string()).or_default().push(p);
    }
    Ok(out)
}

pub fn read_proposals(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<Proposal>>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_proposals(&text, &path.display().to_string())
}
