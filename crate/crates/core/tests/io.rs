use std::path::Path;

use lbmtrack::io::{
    decode_checkpoint, decode_ppm, encode_checkpoint, encode_detections, encode_ppm, load_checkpoint, parse_detections,
    read_frames, save_checkpoint, write_clip_dir, DetectionRow, GtFile, TrackFile,
};
use lbmtrack::model::{Model, ModelConfig};
use lbmtrack::pipeline::{gen_clip, gt_as_tracks};
use lbmtrack::synth::{Image, SceneSpec};
use lbmtrack::Error;
use proptest::prelude::*;

fn model() -> Model<f32> {
    Model::new(&ModelConfig { d: 16, enc_channels: 8, mem_len: 3, mlp_ratio: 1, ..ModelConfig::default() }, 4).unwrap()
}

fn u32_at(b: &[u8], at: usize) -> usize {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap()) as usize
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.lbmt"), dir.path().join("b.lbmt"));
    save_checkpoint(&a, &model()).unwrap();
    save_checkpoint(&b, &load_checkpoint(&a).unwrap()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    // Only the two checkpoints remain: no temporary files are left behind.
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
}

#[test]
fn checkpoint_header_layout() {
    let b = encode_checkpoint(&model()).unwrap();
    assert_eq!(&b[..4], b"LBMT");
    assert_eq!(u32_at(&b, 4), 1);
    let c = u32_at(&b, 8);
    let echo = std::str::from_utf8(&b[12..12 + c]).unwrap();
    assert!(echo.contains("d = 16"), "{echo}");
    assert!(u32_at(&b, 12 + c) > 0);
}

#[test]
fn corrupt_checkpoints_are_rejected_naming_the_file() {
    let good = encode_checkpoint(&model()).unwrap();
    let c = u32_at(&good, 8);
    let name_len = u32_at(&good, 16 + c);
    let dtype_at = 20 + c + name_len;
    let mut cases: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut magic = good.clone();
    magic[0] = b'X';
    cases.push(("magic", magic));
    let mut version = good.clone();
    version[4] = 2;
    cases.push(("version", version));
    let mut dtype = good.clone();
    dtype[dtype_at] = 7;
    cases.push(("dtype", dtype));
    cases.push(("truncated", good[..good.len() - 3].to_vec()));
    cases.push(("header only", good[..10].to_vec()));
    let mut trailing = good.clone();
    trailing.push(0);
    cases.push(("trailing", trailing));
    for (what, bytes) in cases {
        let e = decode_checkpoint(&bytes, Path::new("broken.lbmt")).err().unwrap_or_else(|| panic!("{what} accepted"));
        assert!(e.to_string().contains("broken.lbmt"), "{what}: {e}");
    }
    assert!(decode_checkpoint(&good, Path::new("ok.lbmt")).is_ok());
}

#[test]
fn clip_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (clip, gt) =
        gen_clip(&SceneSpec { seed: 8, height: 32, width: 48, frames: 4, ..SceneSpec::default() }, 5).unwrap();
    write_clip_dir(dir.path(), &clip.frames, &gt).unwrap();
    assert_eq!(read_frames(dir.path()).unwrap(), clip.frames);
    let back = GtFile::read(&dir.path().join("gt.jsonl")).unwrap();
    assert_eq!(back, gt);
    let tracks = gt_as_tracks(&gt);
    let text = String::from_utf8(tracks.encode().unwrap()).unwrap();
    assert_eq!(TrackFile::parse(&text, Path::new("t")).unwrap(), tracks);
}

#[test]
fn gt_with_wrong_point_count_reports_its_line() {
    let (_, gt) =
        gen_clip(&SceneSpec { seed: 8, height: 32, width: 48, frames: 3, ..SceneSpec::default() }, 2).unwrap();
    let mut g = gt.clone();
    g.frames[1].points.pop();
    g.frames[1].visible.pop();
    let dir = tempfile::tempdir().unwrap();
    write_clip_dir(dir.path(), &[], &g).unwrap();
    match GtFile::read(&dir.path().join("gt.jsonl")) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

fn image() -> impl Strategy<Value = Image> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<u8>(), 3 * h * w).prop_map(move |data| Image { height: h, width: w, data })
    })
}

fn row() -> impl Strategy<Value = DetectionRow> {
    (0usize..50, -100.0f64..100.0, -100.0f64..100.0, 0.01f64..50.0, 0.01f64..50.0, any::<u32>(), 0.0f64..=1.0).prop_map(
        |(frame, x1, y1, w, h, label, score)| DetectionRow { frame, x1, y1, x2: x1 + w, y2: y1 + h, label, score },
    )
}

proptest! {
    #[test]
    fn ppm_round_trips(img in image()) {
        prop_assert_eq!(decode_ppm(&encode_ppm(&img), Path::new("p")).unwrap(), img);
    }

    #[test]
    fn detections_round_trip(rows in proptest::collection::vec(row(), 0..12)) {
        prop_assert_eq!(parse_detections(&encode_detections(&rows), Path::new("d")).unwrap(), rows);
    }
}
