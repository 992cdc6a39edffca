//! Conflict-marker parsing and per-PR severity metrics.
//!
//! Files are handled as raw bytes. A "line" is the byte run between `\n`
//! terminators (the terminator itself excluded); a trailing newline does not
//! produce an extra empty line. Hashes are computed over these raw bytes, so
//! lossy UTF-8 decoding only ever affects previews.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Number of leading lines kept per side when no explicit limit is given.
pub const DEFAULT_PREVIEW_LINES: usize = 5;

/// Bytes inspected by the binary-file heuristic.
pub const BINARY_SNIFF_LEN: usize = 8000;

const OPEN_MARKER: &[u8] = b"<<<<<<<";
const BASE_MARKER: &[u8] = b"|||||||";
const MID_MARKER: &[u8] = b"=======";
const CLOSE_MARKER: &[u8] = b">>>>>>>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("conflict region opened at line {start_line} is not terminated")]
    UnterminatedRegion { start_line: usize },
    #[error("closing marker at line {end_line} precedes a separator (region opened at line {start_line})")]
    SeparatorMissing { start_line: usize, end_line: usize },
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::UnterminatedRegion { .. } => "UNTERMINATED_REGION",
            ParseError::SeparatorMissing { .. } => "SEPARATOR_MISSING",
        }
    }
}

/// One marker-delimited hunk as found in a file, before it is tied to a PR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRegion {
    pub region_index: usize,
    pub start_line: usize,
    pub mid_line: usize,
    pub end_line: usize,
    pub ours_len: usize,
    pub theirs_len: usize,
    pub ours_hash: String,
    pub theirs_hash: String,
    pub ours_preview: Vec<String>,
    pub theirs_preview: Vec<String>,
    /// Set when a diff3-style `|||||||` base section was folded into the ours span.
    pub has_base_section: bool,
}

impl ParsedRegion {
    pub fn conflict_lines(&self) -> usize {
        self.ours_len + self.theirs_len
    }

    pub fn into_record(self, pr_key: &str, file_path: &str) -> ConflictRegion {
        ConflictRegion {
            pr_key: pr_key.to_string(),
            file_path: file_path.to_string(),
            region_index: self.region_index,
            start_line: self.start_line,
            mid_line: self.mid_line,
            end_line: self.end_line,
            ours_len: self.ours_len,
            theirs_len: self.theirs_len,
            ours_hash: self.ours_hash,
            theirs_hash: self.theirs_hash,
            ours_preview: self.ours_preview,
            theirs_preview: self.theirs_preview,
            has_base_section: self.has_base_section,
        }
    }
}

/// A conflict region attributed to a PR and file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictRegion {
    pub pr_key: String,
    pub file_path: String,
    pub region_index: usize,
    pub start_line: usize,
    pub mid_line: usize,
    pub end_line: usize,
    pub ours_len: usize,
    pub theirs_len: usize,
    pub ours_hash: String,
    pub theirs_hash: String,
    pub ours_preview: Vec<String>,
    pub theirs_preview: Vec<String>,
    #[serde(default)]
    pub has_base_section: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictType {
    BothModified,
    DeletedByUs,
    DeletedByThem,
    AddedByBoth,
    AddedByUs,
    AddedByThem,
    Binary,
}

impl ConflictType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConflictType::BothModified => "both_modified",
            ConflictType::DeletedByUs => "deleted_by_us",
            ConflictType::DeletedByThem => "deleted_by_them",
            ConflictType::AddedByBoth => "added_by_both",
            ConflictType::AddedByUs => "added_by_us",
            ConflictType::AddedByThem => "added_by_them",
            ConflictType::Binary => "binary",
        }
    }

    /// Whether the file is expected to carry textual markers.
    pub fn has_text_markers(&self) -> bool {
        matches!(self, ConflictType::BothModified | ConflictType::AddedByBoth)
    }
}

impl std::fmt::Display for ConflictType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictFileRecord {
    pub pr_key: String,
    pub file_path: String,
    pub num_regions: usize,
    pub conflict_lines: usize,
    pub file_extension: String,
    pub conflict_type: ConflictType,
    /// Parser diagnostic, e.g. an unterminated region or a folded base section.
    #[serde(default)]
    pub parse_note: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeverityMetrics {
    pub num_conflict_files: usize,
    pub num_conflict_regions: usize,
    pub conflict_lines: usize,
}

impl SeverityMetrics {
    pub fn is_zero(&self) -> bool {
        *self == SeverityMetrics::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("severity inputs mix pull requests {first:?} and {other:?}")]
pub struct MixedPrKeys {
    pub first: String,
    pub other: String,
}

/// Splits raw file contents into lines without their `\n` terminators.
pub fn split_lines(text: &[u8]) -> Vec<&[u8]> {
    if text.is_empty() {
        return Vec::new();
    }
    let body = text.strip_suffix(b"\n").unwrap_or(text);
    body.split(|b| *b == b'\n').collect()
}

fn is_marker(line: &[u8], marker: &[u8]) -> bool {
    match line.strip_prefix(marker) {
        Some(rest) => matches!(rest.first(), None | Some(b' ') | Some(b'\r')),
        None => false,
    }
}

enum State {
    Outside,
    Ours { start: usize, base_at: Option<usize> },
    Theirs { start: usize, base_at: Option<usize>, mid: usize },
}

/// Parses merge-style conflict markers out of `text`.
///
/// Line numbers in the result are 1-based. Marker lookalikes inside an open
/// region (a nested `<<<<<<<`, or a second `=======` after the separator)
/// are treated as content.
pub fn parse_conflict_regions(
    text: &[u8],
    preview_lines: usize,
) -> Result<Vec<ParsedRegion>, ParseError> {
    let lines = split_lines(text);
    parse_lines(&lines, preview_lines)
}

pub fn parse_lines(lines: &[&[u8]], preview_lines: usize) -> Result<Vec<ParsedRegion>, ParseError> {
    let mut regions = Vec::new();
    let mut state = State::Outside;

    for (idx, line) in lines.iter().enumerate() {
        state = match state {
            State::Outside => {
                if is_marker(line, OPEN_MARKER) {
                    State::Ours { start: idx, base_at: None }
                } else {
                    State::Outside
                }
            }
            State::Ours { start, base_at } => {
                if is_marker(line, MID_MARKER) {
                    State::Theirs { start, base_at, mid: idx }
                } else if is_marker(line, CLOSE_MARKER) {
                    return Err(ParseError::SeparatorMissing {
                        start_line: start + 1,
                        end_line: idx + 1,
                    });
                } else if base_at.is_none() && is_marker(line, BASE_MARKER) {
                    State::Ours { start, base_at: Some(idx) }
                } else {
                    State::Ours { start, base_at }
                }
            }
            State::Theirs { start, base_at, mid } => {
                if is_marker(line, CLOSE_MARKER) {
                    let ours_end = base_at.unwrap_or(mid);
                    let ours = &lines[start + 1..ours_end];
                    let theirs = &lines[mid + 1..idx];
                    regions.push(ParsedRegion {
                        region_index: regions.len(),
                        start_line: start + 1,
                        mid_line: mid + 1,
                        end_line: idx + 1,
                        ours_len: mid - start - 1,
                        theirs_len: idx - mid - 1,
                        ours_hash: hash_side(ours),
                        theirs_hash: hash_side(theirs),
                        ours_preview: preview_side(ours, preview_lines),
                        theirs_preview: preview_side(theirs, preview_lines),
                        has_base_section: base_at.is_some(),
                    });
                    State::Outside
                } else {
                    State::Theirs { start, base_at, mid }
                }
            }
        };
    }

    match state {
        State::Outside => Ok(regions),
        State::Ours { start, .. } | State::Theirs { start, .. } => {
            Err(ParseError::UnterminatedRegion { start_line: start + 1 })
        }
    }
}

/// Lowercase hex SHA-256 of the side's lines joined by `\n`.
pub fn hash_side<L: AsRef<[u8]>>(lines: &[L]) -> String {
    let mut hasher = Sha256::new();
    for (i, line) in lines.iter().enumerate() {
        if i > 0 {
            hasher.update(b"\n");
        }
        hasher.update(line.as_ref());
    }
    hex::encode(hasher.finalize())
}

/// The first `n` lines of a side, decoded lossily.
pub fn preview_side<L: AsRef<[u8]>>(lines: &[L], n: usize) -> Vec<String> {
    lines
        .iter()
        .take(n)
        .map(|l| String::from_utf8_lossy(l.as_ref()).into_owned())
        .collect()
}

pub fn looks_binary(content: &[u8]) -> bool {
    content.iter().take(BINARY_SNIFF_LEN).any(|b| *b == 0)
}

/// Extension of the final path segment, lowercased; empty when there is none.
pub fn file_extension(path: &str) -> String {
    let name = path.rsplit('/').next().unwrap_or(path);
    match name.rfind('.') {
        Some(pos) if pos + 1 < name.len() => name[pos + 1..].to_lowercase(),
        _ => String::new(),
    }
}

/// Outcome of extracting one unmerged file.
#[derive(Debug, Clone)]
pub struct FileExtraction {
    pub file: ConflictFileRecord,
    pub regions: Vec<ConflictRegion>,
}

/// Builds the file record and its regions from the file's bytes as left in
/// the worktree by the merge. `content` is `None` when the file is absent.
pub fn extract_file(
    pr_key: &str,
    file_path: &str,
    conflict_type: ConflictType,
    content: Option<&[u8]>,
    preview_lines: usize,
) -> FileExtraction {
    let mut file = ConflictFileRecord {
        pr_key: pr_key.to_string(),
        file_path: file_path.to_string(),
        num_regions: 0,
        conflict_lines: 0,
        file_extension: file_extension(file_path),
        conflict_type,
        parse_note: None,
    };
    let Some(content) = content else {
        return FileExtraction { file, regions: Vec::new() };
    };
    if looks_binary(content) {
        file.conflict_type = ConflictType::Binary;
        return FileExtraction { file, regions: Vec::new() };
    }
    match parse_conflict_regions(content, preview_lines) {
        Ok(parsed) => {
            if parsed.iter().any(|r| r.has_base_section) {
                file.parse_note = Some("diff3 base section folded into ours span".to_string());
            }
            file.num_regions = parsed.len();
            file.conflict_lines = parsed.iter().map(ParsedRegion::conflict_lines).sum();
            let regions = parsed
                .into_iter()
                .map(|r| r.into_record(pr_key, file_path))
                .collect();
            FileExtraction { file, regions }
        }
        Err(err) => {
            file.parse_note = Some(format!("{}: {err}", err.code()));
            FileExtraction { file, regions: Vec::new() }
        }
    }
}

pub fn compute_severity(files: &[ConflictFileRecord]) -> Result<SeverityMetrics, MixedPrKeys> {
    if let Some(first) = files.first() {
        if let Some(other) = files.iter().find(|f| f.pr_key != first.pr_key) {
            return Err(MixedPrKeys {
                first: first.pr_key.clone(),
                other: other.pr_key.clone(),
            });
        }
    }
    Ok(SeverityMetrics {
        num_conflict_files: files.len(),
        num_conflict_regions: files.iter().map(|f| f.num_regions).sum(),
        conflict_lines: files.iter().map(|f| f.conflict_lines).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(text: &str) -> Vec<&[u8]> {
        split_lines(text.as_bytes())
    }

    fn file(pr: &str, regions: usize, conflict_lines: usize) -> ConflictFileRecord {
        ConflictFileRecord {
            pr_key: pr.to_string(),
            file_path: format!("f{regions}.rs"),
            num_regions: regions,
            conflict_lines,
            file_extension: "rs".into(),
            conflict_type: ConflictType::BothModified,
            parse_note: None,
        }
    }

    #[test]
    fn no_markers_yields_nothing() {
        let regions = parse_conflict_regions(b"fn main() {}\nlet x = 1;\n", 5).unwrap();
        assert!(regions.is_empty());
        assert!(parse_conflict_regions(b"", 5).unwrap().is_empty());
    }

    #[test]
    fn single_region_boundaries() {
        let text = "a\n<<<<<<< HEAD\nx\n=======\ny\nz\n>>>>>>> feat\nb\n";
        let regions = parse_conflict_regions(text.as_bytes(), 5).unwrap();
        assert_eq!(regions.len(), 1);
        let r = &regions[0];
        assert_eq!((r.start_line, r.mid_line, r.end_line), (2, 4, 7));
        assert_eq!((r.ours_len, r.theirs_len), (1, 2));
        assert_eq!(r.ours_hash, hash_side(&lines("x")));
        assert_eq!(r.theirs_hash, hash_side(&lines("y\nz")));
        assert_eq!(r.theirs_preview, vec!["y", "z"]);
    }

    #[test]
    fn back_to_back_regions_are_indexed() {
        let text = "<<<<<<< HEAD\na\n=======\nb\n>>>>>>> x\n<<<<<<< HEAD\n=======\nc\n>>>>>>> x\n";
        let regions = parse_conflict_regions(text.as_bytes(), 5).unwrap();
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].region_index, 0);
        assert_eq!(regions[1].region_index, 1);
        assert!(regions[0].end_line < regions[1].start_line);
        assert_eq!(regions[1].ours_len, 0);
        assert_eq!(regions[1].ours_hash, hash_side::<&[u8]>(&[]));
    }

    #[test]
    fn unterminated_and_missing_separator() {
        let err = parse_conflict_regions(b"<<<<<<< HEAD\na\n=======\nb\n", 5).unwrap_err();
        assert_eq!(err, ParseError::UnterminatedRegion { start_line: 1 });
        assert_eq!(err.code(), "UNTERMINATED_REGION");
        let err = parse_conflict_regions(b"x\n<<<<<<< HEAD\na\n>>>>>>> b\n", 5).unwrap_err();
        assert_eq!(err, ParseError::SeparatorMissing { start_line: 2, end_line: 4 });
    }

    #[test]
    fn lookalikes_do_not_open_regions() {
        let text = " <<<<<<< HEAD\n<<<<<< HEAD\n<<<<<<<< HEAD\nx <<<<<<< y\n<<<<<<<HEAD\n";
        assert!(parse_conflict_regions(text.as_bytes(), 5).unwrap().is_empty());
    }

    #[test]
    fn bare_markers_and_crlf() {
        let text = "<<<<<<<\r\na\r\n=======\r\nb\r\n>>>>>>>\r\n";
        let regions = parse_conflict_regions(text.as_bytes(), 5).unwrap();
        assert_eq!(regions.len(), 1);
        // raw bytes (including the carriage return) define identity
        assert_eq!(regions[0].ours_hash, hash_side(&[b"a\r".as_slice()]));
    }

    #[test]
    fn nested_open_marker_is_content() {
        let text = "<<<<<<< HEAD\n<<<<<<< inner\n=======\n=======\n>>>>>>> x\n";
        let regions = parse_conflict_regions(text.as_bytes(), 5).unwrap();
        assert_eq!(regions.len(), 1);
        let r = &regions[0];
        assert_eq!((r.start_line, r.mid_line, r.end_line), (1, 3, 5));
        assert_eq!(r.ours_preview, vec!["<<<<<<< inner"]);
        assert_eq!(r.theirs_preview, vec!["======="]);
    }

    #[test]
    fn diff3_base_section_is_folded() {
        let text = "<<<<<<< ours\na\n||||||| base\norig\n=======\nb\n>>>>>>> theirs\n";
        let regions = parse_conflict_regions(text.as_bytes(), 5).unwrap();
        let r = &regions[0];
        assert!(r.has_base_section);
        assert_eq!(r.ours_len, r.mid_line - r.start_line - 1);
        assert_eq!(r.ours_preview, vec!["a"]);
        assert_eq!(r.ours_hash, hash_side(&[b"a".as_slice()]));
    }

    #[test]
    fn hash_vectors() {
        assert_eq!(
            hash_side::<&[u8]>(&[]),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash_side(&["abc"]),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(hash_side(&["x", "y"]), hex::encode(Sha256::digest(b"x\ny")));
    }

    #[test]
    fn previews() {
        let three = ["1", "2", "3"];
        assert_eq!(preview_side(&three, 5), vec!["1", "2", "3"]);
        let ten: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        assert_eq!(preview_side(&ten, DEFAULT_PREVIEW_LINES), ten[..5].to_vec());
        assert!(preview_side::<&str>(&[], 5).is_empty());
        assert_eq!(preview_side(&[b"\xffok".as_slice()], 5), vec!["\u{fffd}ok"]);
    }

    #[test]
    fn extensions() {
        assert_eq!(file_extension("src/Main.RS"), "rs");
        assert_eq!(file_extension("Makefile"), "");
        assert_eq!(file_extension("a.d/noext"), "");
        assert_eq!(file_extension("archive.tar.gz"), "gz");
        assert_eq!(file_extension(".gitignore"), "gitignore");
        assert_eq!(file_extension("trailing."), "");
    }

    #[test]
    fn severity_sums() {
        assert_eq!(compute_severity(&[]).unwrap(), SeverityMetrics::default());
        let m = compute_severity(&[file("a/b#1", 1, 4), file("a/b#1", 3, 10)]).unwrap();
        assert_eq!(
            m,
            SeverityMetrics { num_conflict_files: 2, num_conflict_regions: 4, conflict_lines: 14 }
        );
        let mut md = file("a/b#1", 0, 0);
        md.conflict_type = ConflictType::DeletedByUs;
        let m = compute_severity(&[md]).unwrap();
        assert_eq!(
            m,
            SeverityMetrics { num_conflict_files: 1, num_conflict_regions: 0, conflict_lines: 0 }
        );
        assert!(compute_severity(&[file("a/b#1", 1, 1), file("a/b#2", 1, 1)]).is_err());
    }

    #[test]
    fn extract_binary_and_unterminated() {
        let ex = extract_file("a/b#1", "img.PNG", ConflictType::BothModified, Some(b"\x89PNG\0\0"), 5);
        assert_eq!(ex.file.conflict_type, ConflictType::Binary);
        assert_eq!(ex.file.file_extension, "png");
        assert!(ex.regions.is_empty());

        let ex = extract_file("a/b#1", "x.txt", ConflictType::BothModified, Some(b"<<<<<<< HEAD\n"), 5);
        assert_eq!(ex.file.num_regions, 0);
        assert!(ex.file.parse_note.unwrap().starts_with("UNTERMINATED_REGION"));

        let ex = extract_file("a/b#1", "gone.c", ConflictType::DeletedByThem, None, 5);
        assert_eq!(ex.file.num_regions, 0);
    }
}
