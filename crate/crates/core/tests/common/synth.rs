//! Random conflicted files with known ground truth.

use mergescope_core::parser::hash_side;
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Truth {
    pub start_line: usize,
    pub mid_line: usize,
    pub end_line: usize,
    pub ours_len: usize,
    pub theirs_len: usize,
    pub ours_hash: String,
    pub theirs_hash: String,
    pub has_base_section: bool,
}

pub struct SynthFile {
    pub bytes: Vec<u8>,
    pub regions: Vec<Truth>,
}

// lines that look marker-ish but must stay content
const DECOYS: &[&str] = &[
    "<<<<<<",
    "<<<<<<<<",
    "x <<<<<<< y",
    "=======x",
    "========",
    ">>>>>>>>",
    " >>>>>>> indented",
    "||||||||",
    "",
];

fn content_line<R: Rng>(rng: &mut R) -> String {
    if rng.gen_bool(0.1) {
        return DECOYS[rng.gen_range(0..DECOYS.len())].to_string();
    }
    let len = rng.gen_range(0..40);
    (0..len).map(|_| rng.gen_range(b' '..=b'~') as char).collect()
}

fn block<R: Rng>(rng: &mut R, max: usize) -> Vec<String> {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| content_line(rng)).collect()
}

fn label<R: Rng>(rng: &mut R, marker: &str) -> String {
    match rng.gen_range(0..3) {
        0 => marker.to_string(),
        1 => format!("{marker} HEAD"),
        _ => format!("{marker} {:x}", rng.gen::<u32>()),
    }
}

pub fn generate<R: Rng>(rng: &mut R) -> SynthFile {
    let mut lines: Vec<String> = Vec::new();
    let mut regions = Vec::new();
    let segments = rng.gen_range(0..8);
    for _ in 0..segments {
        lines.extend(block(rng, 6));
        if rng.gen_bool(0.6) {
            let ours = block(rng, 7);
            let theirs = block(rng, 7);
            let base = rng.gen_bool(0.2).then(|| block(rng, 3));

            let start_line = lines.len() + 1;
            lines.push(label(rng, "<<<<<<<"));
            lines.extend(ours.iter().cloned());
            if let Some(base) = &base {
                lines.push(label(rng, "|||||||"));
                lines.extend(base.iter().cloned());
            }
            let mid_line = lines.len() + 1;
            lines.push("=======".to_string());
            lines.extend(theirs.iter().cloned());
            let end_line = lines.len() + 1;
            lines.push(label(rng, ">>>>>>>"));
            regions.push(Truth {
                start_line,
                mid_line,
                end_line,
                ours_len: mid_line - start_line - 1,
                theirs_len: theirs.len(),
                ours_hash: hash_side(&ours),
                theirs_hash: hash_side(&theirs),
                has_base_section: base.is_some(),
            });
        }
    }
    lines.extend(block(rng, 4));
    let mut text = lines.join("\n");
    if !lines.is_empty() && rng.gen_bool(0.8) {
        text.push('\n');
    }
    SynthFile { bytes: text.into_bytes(), regions }
}
