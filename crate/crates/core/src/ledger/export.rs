use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::block::Block;
use super::channel::Channel;

pub fn block_file_name(number: u64) -> String {
    format!("block_{number}.json")
}

/// Writes one block as `<dir>/<channel>/block_<n>.json`.
pub fn export_block(dir: &Path, channel_id: &str, block: &Block) -> io::Result<PathBuf> {
    let target = dir.join(channel_id);
    fs::create_dir_all(&target)?;
    let path = target.join(block_file_name(block.number));
    fs::write(&path, block.to_canonical())?;
    Ok(path)
}

/// Exports every block of `channel`; returns the number written.
pub fn export_channel(dir: &Path, channel: &Channel) -> io::Result<usize> {
    let id = channel.id();
    let blocks = channel.blocks();
    for block in &blocks {
        export_block(dir, &id, block)?;
    }
    Ok(blocks.len())
}

/// Reads `block_0.json`, `block_1.json`, ... until the first gap.
pub fn read_exported(dir: &Path, channel_id: &str) -> io::Result<Vec<Vec<u8>>> {
    let base = dir.join(channel_id);
    if !base.is_dir() {
        return Err(io::Error::new(
            io::ErrorKind::NotFound,
            format!("no exported blocks under {}", base.display()),
        ));
    }
    let mut out = Vec::new();
    loop {
        let path = base.join(block_file_name(out.len() as u64));
        match fs::read(&path) {
            Ok(bytes) => out.push(bytes),
            Err(e) if e.kind() == io::ErrorKind::NotFound => break,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::*;
    use super::*;

    #[test]
    fn export_then_verify() {
        let id = identity();
        let ch = Channel::create(genesis(&id), Backend::EmbeddedKv).unwrap();
        for i in 0..4 {
            ch.append_block(next_block(&ch, vec![tx(&id, i, &[("k", Some(b"v"))])], vec![ValidationCode::Valid]))
                .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(export_channel(dir.path(), &ch).unwrap(), 5);
        let files = read_exported(dir.path(), "ch1").unwrap();
        assert_eq!(files.len(), 5);
        let text = String::from_utf8(files[2].clone()).unwrap();
        assert!(text.starts_with("{\"commit_hash\":\""));
        assert!(!text.contains(' '));
        let blocks = verify_encoded_chain(&files).unwrap();
        assert_eq!(blocks, ch.blocks());

        let mut tampered = files.clone();
        let idx = tampered[3].len() / 2;
        tampered[3][idx] ^= 0x20;
        assert_eq!(verify_encoded_chain(&tampered).unwrap_err(), BrokenLink { block: 3 });
        assert!(read_exported(dir.path(), "other").is_err());
    }
}
