//! On-disk formats: checkpoints, PPM frames, ground truth and track files,
//! detection lists and association event logs. See FORMATS.md.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::supervision::FrameGt;
use crate::synth::Image;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LBMT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
/// Version field of every line-delimited header record.
pub const RECORD_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- checkpoint

/// Serializes the model config and every parameter tensor.
pub fn encode_checkpoint(model: &Model<f32>) -> Result<Vec<u8>> {
    let cfg = toml::to_string(model.config()).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid UTF-8"))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), msg: msg.into() }
    }
}

/// Inverse of [`encode_checkpoint`]; `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let cfg_text = r.string()?;
    let cfg: ModelConfig = toml::from_str(&cfg_text).map_err(|e| r.err(format!("config echo: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::default();
    for _ in 0..count {
        let name = r.string()?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(r.err(format!("{name}: unknown dtype tag {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.push(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_params(&cfg, params).map_err(|e| r.err(e.to_string()))
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    decode_checkpoint(&read(path)?, path)
}

// ---------------------------------------------------------------------- PPM

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Reads a binary (P6) PPM with maxval 255; `#` comments are allowed in the header.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let err = |m: &str| Error::Format { path: path.to_path_buf(), msg: m.to_string() };
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(err("only binary P6 PPM is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad PPM header number"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(err("PPM maxval must be 255"));
    }
    pos += 1;
    let n = 3 * width * height;
    if bytes.len() < pos + n {
        return Err(err("truncated PPM pixel data"));
    }
    Ok(Image { height, width, data: bytes[pos..pos + n].to_vec() })
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read(path)?, path)
}

// ------------------------------------------------------ line-delimited records

/// First record of `gt.jsonl` and of a track file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipHeader {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub query_frame: usize,
    pub queries: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub frame: usize,
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

/// One tracked frame: per query `[x, y, visibility, confidence]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub frame: usize,
    pub points: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtFile {
    pub header: ClipHeader,
    pub frames: Vec<FrameGt>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackFile {
    pub header: ClipHeader,
    pub records: Vec<TrackRecord>,
}

fn jsonl<T: Serialize>(header: &ClipHeader, records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let enc = |e: serde_json::Error| Error::Input(e.to_string());
    serde_json::to_writer(&mut out, header).map_err(enc)?;
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(enc)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Parses a header line followed by records, checking frame order and query count.
fn parse_jsonl<T, F>(text: &str, path: &Path, mut check: F) -> Result<(ClipHeader, Vec<T>)>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(&ClipHeader, &T, Option<&T>) -> std::result::Result<(), String>,
{
    let perr = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, first) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let header: ClipHeader = serde_json::from_str(first).map_err(|e| perr(hl + 1, e.to_string()))?;
    if header.version != RECORD_VERSION {
        return Err(perr(hl + 1, format!("unsupported version {}", header.version)));
    }
    let mut out: Vec<T> = Vec::new();
    for (i, l) in lines {
        let rec: T = serde_json::from_str(l).map_err(|e| perr(i + 1, e.to_string()))?;
        check(&header, &rec, out.last()).map_err(|m| perr(i + 1, m))?;
        out.push(rec);
    }
    Ok((header, out))
}

impl GtFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let recs: Vec<GtRecord> = self
            .frames
            .iter()
            .enumerate()
            .map(|(t, g)| GtRecord { frame: t, points: g.points.clone(), visible: g.visible.clone() })
            .collect();
        jsonl(&self.header, &recs)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let (header, recs) = parse_jsonl::<GtRecord, _>(text, path, |h, r, prev| {
            let want = prev.map_or(0, |p| p.frame + 1);
            if r.frame != want {
                return Err(format!("expected frame {want}, found {}", r.frame));
            }
            if r.points.len() != h.queries.len() || r.visible.len() != h.queries.len() {
                return Err(format!("expected {} points", h.queries.len()));
            }
            Ok(())
        })?;
        if recs.len() != header.frames {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("{} of {} frames", recs.len(), header.frames),
            });
        }
        let frames = recs.into_iter().map(|r| FrameGt { points: r.points, visible: r.visible }).collect();
        Ok(Self { header, frames })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }
}

impl TrackFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        jsonl(&self.header, &self.records)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let (header, records) = parse_jsonl::<TrackRecord, _>(text, path, |h, r, prev| {
            if let Some(p) = prev {
                if r.frame <= p.frame {
                    return Err(format!("frame {} after {}", r.frame, p.frame));
                }
            }
            if r.points.len() != h.queries.len() {
                return Err(format!("expected {} points", h.queries.len()));
            }
            Ok(())
        })?;
        Ok(Self { header, records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }
}

// ---------------------------------------------------------------- clip dirs

pub const GT_FILE: &str = "gt.jsonl";

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:04}.ppm"))
}

/// Writes `frames` as PPM files plus `gt.jsonl` into `dir` (created if needed).
pub fn write_clip_dir(dir: &Path, frames: &[Image], gt: &GtFile) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, img) in frames.iter().enumerate() {
        write_ppm(&frame_path(dir, t), img)?;
    }
    write_atomic(&dir.join(GT_FILE), &gt.encode()?)
}

/// Reads `frame_0000.ppm`, `frame_0001.ppm`, … until the first missing index.
pub fn read_frames(dir: &Path) -> Result<Vec<Image>> {
    let mut out = Vec::new();
    loop {
        let p = frame_path(dir, out.len());
        if !p.exists() {
            break;
        }
        let img = read_ppm(&p)?;
        if let Some(first) = out.first() {
            let first: &Image = first;
            if (first.height, first.width) != (img.height, img.width) {
                return Err(Error::Format { path: p, msg: "frame size differs from frame 0".into() });
            }
        }
        out.push(img);
    }
    if out.is_empty() {
        return Err(Error::Input(format!("{}: no frame_0000.ppm", dir.display())));
    }
    Ok(out)
}

// --------------------------------------------------------------- detections

/// One detection row: `frame,x1,y1,x2,y2,label,score`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub frame: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub label: u32,
    pub score: f64,
}

/// Parses a detections file (comma-separated, `#` comments, no header).
pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<DetectionRow>> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rd.deserialize::<DetectionRow>() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse { path: path.to_path_buf(), line, msg: e.to_string() }
        })?;
        out.push(row);
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRow>> {
    parse_detections(&read_text(path)?, path)
}

pub fn encode_detections(rows: &[DetectionRow]) -> String {
    let mut s = String::from("# frame,x1,y1,x2,y2,label,score\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{},{}\n", r.frame, r.x1, r.y1, r.x2, r.y2, r.label, r.score));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = Image { height: 2, width: 3, data: (0..18).collect() };
        let back = decode_ppm(&encode_ppm(&img), Path::new("x.ppm")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_with_comment() {
        let mut b = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        b.extend([1, 2, 3]);
        assert_eq!(decode_ppm(&b, Path::new("x")).unwrap().data, vec![1, 2, 3]);
    }

    #[test]
    fn checkpoint_rejects_bad_version() {
        let m = Model::<f32>::new(&ModelConfig { d: 8, enc_channels: 2, ..Default::default() }, 0).unwrap();
        let mut b = encode_checkpoint(&m).unwrap();
        b[4] = 9;
        let e = decode_checkpoint(&b, Path::new("m.ckpt")).unwrap_err();
        assert!(e.to_string().contains("version 9"), "{e}");
        let b = encode_checkpoint(&m).unwrap();
        assert!(decode_checkpoint(&b[..b.len() - 1], Path::new("m")).is_err());
    }

    #[test]
    fn detections_report_line() {
        let text = "# c\n0,1,2,3,4,1,0.9\n1,1,2,oops,4,1,0.9\n";
        let e = parse_detections(text, Path::new("d.csv")).unwrap_err();
        match e {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn track_file_rejects_out_of_order_frames() {
        let h = ClipHeader { version: 1, height: 16, width: 16, frames: 3, query_frame: 0, queries: vec![[1.0, 1.0]] };
        let tf = TrackFile {
            header: h,
            records: vec![
                TrackRecord { frame: 1, points: vec![[0.0; 4]] },
                TrackRecord { frame: 1, points: vec![[0.0; 4]] },
            ],
        };
        let text = String::from_utf8(tf.encode().unwrap()).unwrap();
        let e = TrackFile::parse(&text, Path::new("t.jsonl")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
    }
}
