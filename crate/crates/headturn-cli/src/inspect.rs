//! `inspect`: print an archive's manifest, one `name shape dtype` line per
//! array in insertion order.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;

use clap::Args;
use headturn::archive::Archive;
use headturn::error::{Error, Result};

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Archive to describe.
    pub archive: PathBuf,
}

pub fn run(args: &InspectArgs) -> Result<()> {
    let ar = Archive::read(&args.archive)?;
    let mut listing = String::new();
    for (name, array) in ar.entries() {
        writeln!(listing, "{name} {:?} {}", array.shape(), array.dtype())
            .expect("string formatting");
    }
    match std::io::stdout().write_all(listing.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => other.map_err(|e| Error::io("stdout", e)),
    }
}
