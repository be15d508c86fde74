use std::io::Write;

use gulm_core::io::{read_config, read_locations, read_rf, write_locations, write_rf, LocationRecord, RfHeader};
use gulm_core::types::{RFFrame, Vec2};
use gulm_core::Error;

fn header() -> RfHeader {
    RfHeader {
        num_channels: 2,
        num_samples: 4,
        sample_rate: 62.5e6,
    }
}

fn frame(id: u64) -> RFFrame {
    RFFrame::from_samples(id, 2, 4, (0..8).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap()
}

#[test]
fn rf_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.gulm");
    write_rf(&path, header(), &[frame(7), frame(9)]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    // 24-byte header, then per frame an 8-byte id and 8 f32 samples.
    assert_eq!(bytes.len(), 24 + 2 * (8 + 8 * 4));
    assert_eq!(&bytes[..4], b"GULM");
    assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 7);
    assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), -1.0);
    let (h, frames) = read_rf(&path).unwrap();
    assert_eq!(h, header());
    assert_eq!(frames, vec![frame(7), frame(9)]);
}

#[test]
fn rf_damage_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.gulm");
    write_rf(&path, header(), &[frame(0)]).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let truncated = dir.path().join("t.gulm");
    std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_rf(&truncated), Err(Error::CorruptStream(_))));

    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    let bad_magic = dir.path().join("m.gulm");
    std::fs::write(&bad_magic, &wrong).unwrap();
    assert!(matches!(read_rf(&bad_magic), Err(Error::Format(_))));
}

#[test]
fn locations_keep_nine_significant_digits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loc.csv");
    let rec = LocationRecord {
        frame_id: 3,
        position: Vec2::new(1.234567891234e-3, 1.0e-2 / 3.0),
        support: 5,
        spread: 2.5e-6,
    };
    write_locations(&path, &[rec]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "frame_id,x_m,z_m,support,spread_m");
    assert!(text.contains("1.23456789e-3"), "{text}");
    let back = read_locations(&path).unwrap();
    assert_eq!(back.len(), 1);
    assert!((back[0].position.y - 1.0e-2 / 3.0).abs() < 1e-11);
    assert_eq!(back[0].support, 5);
}

#[test]
fn config_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(
        f,
        "seed = 4\n[acquisition]\nspeed_of_sound = 1500.0\nsample_rate = 50e6\ncenter_frequency = 5e6\n\
         [pipeline]\nchannels = \"even:16\"\n"
    )
    .unwrap();
    let cfg = read_config(&path).unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.acquisition.speed_of_sound, 1500.0);
    assert_eq!(cfg.active_channels().len(), 16);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[acquisition]\nspeed_of_sound = 1540.0\nsample_rate = 62.5e6\ncenter_frequency = 7.8125e6\nmystery = 1\n").unwrap();
    assert!(matches!(read_config(&bad), Err(Error::Validation(_))));
    assert!(read_config(&dir.path().join("missing.toml")).is_err());
}
