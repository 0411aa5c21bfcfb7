use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};

use bout_core::augment::{
    read_container, write_container, AugmentedSample, ChannelScale, ContainerReader, ContainerWriter, Provenance, Split,
};
use bout_core::{Error, Frame};
use proptest::prelude::*;

fn sample(seed: u32, size: usize, channels: usize) -> AugmentedSample {
    let mut x = seed.wrapping_mul(2_654_435_761).wrapping_add(1);
    let mut next = || {
        x ^= x << 13;
        x ^= x >> 17;
        x ^= x << 5;
        x
    };
    let spatial = Frame::new(size, size, (0..size * size).map(|_| next() as u8).collect()).unwrap();
    let temporal = (0..channels * size * size).map(|_| (next() % 7) as u8).collect();
    let scale_meta = (0..channels)
        .map(|c| ChannelScale {
            min: -(c as f32) * 0.5,
            max: c as f32 * 0.25 + (next() % 100) as f32 / 10.0,
        })
        .collect();
    AugmentedSample {
        spatial,
        temporal,
        channels,
        scale_meta,
        label: (seed % 2) as u8,
        provenance: Provenance {
            event_id: format!("video_{seed:04}_s0012"),
            subsample: (seed % 8) as u8,
            flip: seed % 3 == 0,
            crop: (seed % 9) as u8,
            spatial_frame: 42,
            frame_indices: (0..5).map(|i| i * 3).collect(),
        },
    }
}

#[test]
fn empty_split_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("valid.bout");
    assert_eq!(write_container(&path, Split::Valid, &[]).unwrap(), 0);
    let (split, samples) = read_container(&path).unwrap();
    assert_eq!(split, Split::Valid);
    assert!(samples.is_empty());
}

#[test]
fn count_is_conserved_and_access_is_random() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bout");
    let samples: Vec<_> = (0..144).map(|i| sample(i, 8, 4)).collect();
    let mut w = ContainerWriter::create(&path, Split::Train).unwrap();
    for s in &samples {
        w.push(s).unwrap();
    }
    assert_eq!(w.finish().unwrap(), 144);
    let mut r = ContainerReader::open(&path).unwrap();
    assert_eq!(r.len(), 144);
    for i in [143, 0, 77, 5] {
        assert_eq!(r.get(i).unwrap(), samples[i]);
    }
    assert!(r.get(144).is_err());
}

#[test]
fn corrupted_chunk_reports_its_id() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.bout");
    let samples: Vec<_> = (0..3).map(|i| sample(i, 16, 2)).collect();
    write_container(&path, Split::Test, &samples).unwrap();

    // flip one byte in the middle of the second chunk's payload
    let mut r = ContainerReader::open(&path).unwrap();
    r.get(1).unwrap();
    drop(r);
    let mut bytes = Vec::new();
    std::fs::File::open(&path).unwrap().read_to_end(&mut bytes).unwrap();
    let first_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as u64;
    let second = 16 + 8 + first_len;
    let second_len = u32::from_le_bytes(bytes[second as usize..second as usize + 4].try_into().unwrap()) as u64;
    let target = second + 8 + second_len / 2;
    let mut f = OpenOptions::new().read(true).write(true).open(&path).unwrap();
    f.seek(SeekFrom::Start(target)).unwrap();
    let mut b = [0u8; 1];
    f.read_exact(&mut b).unwrap();
    f.seek(SeekFrom::Start(target)).unwrap();
    f.write_all(&[b[0] ^ 0xFF]).unwrap();
    drop(f);

    let mut r = ContainerReader::open(&path).unwrap();
    assert_eq!(r.get(0).unwrap(), samples[0]);
    assert!(matches!(r.get(1), Err(Error::Checksum { chunk: 1 })));
    assert_eq!(r.get(2).unwrap(), samples[2]);
}

#[test]
fn bad_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.bout");
    std::fs::write(&path, b"NOTBOUT-CONTAINER-PADDING-PADDING").unwrap();
    assert!(matches!(ContainerReader::open(&path), Err(Error::Corrupt(_))));
}

#[test]
fn thousand_random_samples_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("many.bout");
    let samples: Vec<_> = (0..1000).map(|i| sample(i * 7 + 1, 4 + (i as usize % 5), 1 + (i as usize % 3))).collect();
    write_container(&path, Split::Train, &samples).unwrap();
    let (_, back) = read_container(&path).unwrap();
    assert_eq!(back, samples);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn arbitrary_sample_round_trips(seed in any::<u32>(), size in 1usize..12, channels in 0usize..6) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bout");
        let s = sample(seed, size, channels);
        write_container(&path, Split::Train, std::slice::from_ref(&s)).unwrap();
        let (_, back) = read_container(&path).unwrap();
        prop_assert_eq!(back, vec![s]);
    }
}
