//! Dependency-free SVG scatter plots of 2-D samples over the world's modes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mixture::SampleBatch;
use crate::world::World;

const SIZE: f64 = 640.0;
const MARGIN: f64 = 24.0;

/// Renders `batch` over the active prompt's components: samples as dots,
/// means as crosses, unsafe components as shaded 2-sigma discs.
pub fn scatter_svg(batch: &SampleBatch, world: &World) -> Result<String> {
    if world.dim() != 2 || batch.dim() != 2 {
        return Err(Error::Svg(format!(
            "scatter plots need a 2-D world (got dimension {}); use the samples CSV instead",
            world.dim().max(batch.dim())
        )));
    }
    let mixture = &world.active_prompt().mixture;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    let mut extend = |p: [f64; 2], pad: [f64; 2]| {
        for j in 0..2 {
            lo[j] = lo[j].min(p[j] - pad[j]);
            hi[j] = hi[j].max(p[j] + pad[j]);
        }
    };
    for c in mixture.components() {
        extend(
            [c.mean[0], c.mean[1]],
            [3.0 * c.var[0].sqrt(), 3.0 * c.var[1].sqrt()],
        );
    }
    for z in batch.iter() {
        extend([z[0], z[1]], [0.0, 0.0]);
    }
    // one scale for both axes keeps circles round
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let px = |x: f64| MARGIN + (x - lo[0]) * scale;
    let py = |y: f64| SIZE - MARGIN - (y - lo[1]) * scale;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (c, &u) in mixture.components().iter().zip(mixture.unsafe_mask()) {
        if u {
            let _ = writeln!(
                s,
                r##"<ellipse cx="{:.3}" cy="{:.3}" rx="{:.3}" ry="{:.3}" fill="#d62728" fill-opacity="0.15"/>"##,
                px(c.mean[0]),
                py(c.mean[1]),
                2.0 * c.var[0].sqrt() * scale,
                2.0 * c.var[1].sqrt() * scale
            );
        }
    }
    let _ = writeln!(s, r##"<g fill="#1f77b4" fill-opacity="0.35">"##);
    for z in batch.iter() {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="1.5"/>"#,
            px(z[0]),
            py(z[1])
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g stroke="black" stroke-width="2">"#);
    for c in mixture.components() {
        let (x, y) = (px(c.mean[0]), py(c.mean[1]));
        let _ = writeln!(
            s,
            r#"<path d="M{:.3} {:.3}L{:.3} {:.3}M{:.3} {:.3}L{:.3} {:.3}"/>"#,
            x - 6.0,
            y - 6.0,
            x + 6.0,
            y + 6.0,
            x - 6.0,
            y + 6.0,
            x + 6.0,
            y - 6.0
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_scatter(batch: &SampleBatch, world: &World, path: &Path) -> Result<()> {
    let svg = scatter_svg(batch, world)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::Provenance;
    use crate::world::{ComponentSpec, PromptDef, VarSpec, WorldSpec};

    #[test]
    fn empty_batch_still_draws_world() {
        let world = World::default_world();
        let empty = SampleBatch::new(2, vec![], 0, Provenance::ChainOutput).unwrap();
        let svg = scatter_svg(&empty, &world).unwrap();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<path").count(), 4);
        assert_eq!(svg.matches("<ellipse").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 0);
    }

    #[test]
    fn identical_inputs_identical_bytes() {
        let world = World::default_world();
        let b = world.active_prompt().mixture.sample(10_000, 1).unwrap();
        let start = std::time::Instant::now();
        let a = scatter_svg(&b, &world).unwrap();
        assert!(start.elapsed().as_secs_f64() < 1.0);
        assert_eq!(a, scatter_svg(&b, &world).unwrap());
    }

    #[test]
    fn three_dimensional_world_is_rejected() {
        let spec = WorldSpec {
            prompts: vec![PromptDef {
                id: "p".into(),
                components: vec![ComponentSpec {
                    weight: 1.0,
                    mean: vec![0.0; 3],
                    var: VarSpec::Scalar(1.0),
                    is_unsafe: false,
                    label: Some("c".into()),
                }],
                embedding: None,
            }],
            prompt: "p".into(),
            concept: "c".into(),
        };
        let world = World::from_spec(&spec).unwrap();
        let b = SampleBatch::new(3, vec![0.0; 3], 0, Provenance::ChainOutput).unwrap();
        let err = scatter_svg(&b, &world).unwrap_err();
        assert!(err.to_string().contains("CSV"));
    }
}
