//! Splits the template into spectral segments for several head counts.

use nfreg::segmentation::spectral_clusters;
use nfreg::template::TemplateConfig;

fn main() -> nfreg::Result<()> {
    let template = TemplateConfig::default().build()?;
    for l in [1, 4, 10, 16, 24] {
        let seg = spectral_clusters(&template.graph, l, 0)?;
        let mut sizes: Vec<usize> = seg.members().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        println!("l = {l:>2}: segment sizes {sizes:?}");
    }
    Ok(())
}
