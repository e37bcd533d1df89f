use std::io;
use std::path::Path;

use crate::error::Error;

/// Write to a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp~");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Map "not found" to a data error naming the file.
pub fn missing(path: &Path, e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::NotFound {
        Error::Missing(path.display().to_string())
    } else {
        Error::Io(e)
    }
}
