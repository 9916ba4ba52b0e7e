//! Whole-file writes that never leave a partial artifact behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TendError};

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| TendError::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| TendError::Data(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp).map_err(|e| TendError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| TendError::io(&tmp, e))?;
        f.sync_all().map_err(|e| TendError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| TendError::io(path, e))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Renders with `render` into memory, then writes atomically.
pub fn write_with(path: &Path, render: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    render(&mut buf)?;
    write_atomic(path, &buf)
}
