//! Pair-list files: a header line, then `source,target,L,T,R,B` per line.
//! Relative paths resolve against the file's own directory.

use std::path::{Path, PathBuf};

use advinpaint::masks::PatchRect;

pub const HEADER: &str = "# advinpaint pair-list v1";

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub source: PathBuf,
    pub target: PathBuf,
    pub rect: PatchRect,
}

pub fn render(records: &[PairRecord]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.source.display(), r.target.display(), r.rect));
    }
    s
}

pub fn parse(text: &str, base: &Path) -> Result<Vec<PairRecord>, String> {
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some(HEADER) => {}
        Some(h) if h.starts_with("# advinpaint pair-list v") => {
            return Err(format!("unsupported pair-list version `{h}`, expected `{HEADER}`"));
        }
        _ => return Err(format!("pair list must start with `{HEADER}`")),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(format!("line {}: expected source,target,L,T,R,B", i + 2));
        }
        let rect = PatchRect::parse(&fields[2..].join(",")).map_err(|e| format!("line {}: {e}", i + 2))?;
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        out.push(PairRecord { source: resolve(fields[0]), target: resolve(fields[1]), rect });
    }
    if out.is_empty() {
        return Err("pair list has no records".into());
    }
    Ok(out)
}
