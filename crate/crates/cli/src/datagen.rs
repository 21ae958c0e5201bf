use std::path::Path;

use anyhow::Result;

use crate::{options, Common};

pub fn run(common: &Common, out: &Path) -> Result<()> {
    let (_, corpus) = options::load(common)?;
    let summary = aend::datagen::gen_corpus(&corpus, out)?;
    print!("{summary}");
    println!("written to {}", out.display());
    Ok(())
}
