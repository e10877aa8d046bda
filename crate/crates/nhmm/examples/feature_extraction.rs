//! Write a one-second 1 kHz tone to a WAV file, extract 40-dim log Mel
//! features (25 ms window, 10 ms shift), and normalize them.

use std::f64::consts::PI;

use nhmm::features::{
    compute_norm_stats, log_mel, normalize, read_wav, write_wav, MelConfig, Waveform,
};

fn main() -> nhmm::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("tone.wav");

    let sample_rate = 16000u32;
    let samples: Vec<i16> = (0..sample_rate)
        .map(|n| {
            let t = n as f64 / sample_rate as f64;
            (8000.0 * (2.0 * PI * 1000.0 * t).sin()) as i16
        })
        .collect();
    write_wav(&path, &Waveform { samples, sample_rate })?;

    let wave = read_wav(&path)?;
    let frames = log_mel(&wave, &MelConfig::default())?;
    println!("frames: {} x {}", frames.num_frames(), frames.dim());

    let mid = frames.row_f64(frames.num_frames() / 2);
    let peak = mid
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    println!("most energetic Mel filter at mid-utterance: {peak}");

    let stats = compute_norm_stats(std::slice::from_ref(&frames))?;
    let norm = normalize(&frames, &stats)?;
    println!(
        "normalized frames: {} x {}, first value {:.4}",
        norm.num_frames(),
        norm.dim(),
        norm.row_f64(0)[0]
    );
    Ok(())
}
