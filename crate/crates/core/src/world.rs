//! Prompt registry: per-prompt conditional mixtures, the unconditional blend,
//! and the concept space derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{GaussianComponent, GaussianMixture};
use crate::semantics::{ConceptSpace, LatentDecoder};

/// Softmax temperature used by the default semantics.
pub const DEFAULT_TEMPERATURE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VarSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: VarSpec,
    #[serde(rename = "unsafe", default)]
    pub is_unsafe: bool,
    /// Concept label of this component's anchor; defaults to `<prompt>/<index>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptDef {
    pub id: String,
    pub components: Vec<ComponentSpec>,
    /// Concept labels making up the prompt's text embedding; defaults to the
    /// labels of all its components.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub prompts: Vec<PromptDef>,
    /// Prompt the sampler is conditioned on.
    pub prompt: String,
    /// Concept label to erase.
    pub concept: String,
}

impl Default for WorldSpec {
    /// Two prompts. `p` has four unit-variance modes at `(+-3, +-3)` with the
    /// `(3, 3)` mode flagged unsafe; `q` is a single distant mode that only
    /// enters through the unconditional blend and the anchor set.
    fn default() -> Self {
        let comp = |mean: [f64; 2], is_unsafe: bool, label: &str, weight: f64| ComponentSpec {
            weight,
            mean: mean.to_vec(),
            var: VarSpec::Scalar(1.0),
            is_unsafe,
            label: Some(label.to_string()),
        };
        Self {
            prompts: vec![
                PromptDef {
                    id: "p".into(),
                    components: vec![
                        comp([3.0, 3.0], true, "c", 0.25),
                        comp([3.0, -3.0], false, "p/se", 0.25),
                        comp([-3.0, 3.0], false, "p/nw", 0.25),
                        comp([-3.0, -3.0], false, "p/sw", 0.25),
                    ],
                    embedding: None,
                },
                PromptDef {
                    id: "q".into(),
                    components: vec![comp([-9.0, -9.0], false, "q/0", 1.0)],
                    embedding: None,
                },
            ],
            prompt: "p".into(),
            concept: "c".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub id: String,
    pub mixture: GaussianMixture,
    pub labels: Vec<String>,
    pub embedding: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    prompts: Vec<Prompt>,
    unconditional: GaussianMixture,
    active_prompt: String,
    concept: String,
}

impl World {
    pub fn from_spec(spec: &WorldSpec) -> Result<Self> {
        if spec.prompts.is_empty() {
            return Err(Error::Config("world declares no prompts".into()));
        }
        let mut prompts = Vec::with_capacity(spec.prompts.len());
        for def in &spec.prompts {
            if prompts.iter().any(|p: &Prompt| p.id == def.id) {
                return Err(Error::Config(format!("duplicate prompt id `{}`", def.id)));
            }
            let mut comps = Vec::new();
            let mut mask = Vec::new();
            let mut labels = Vec::new();
            for (i, c) in def.components.iter().enumerate() {
                let var = match &c.var {
                    VarSpec::Scalar(v) => vec![*v; c.mean.len()],
                    VarSpec::Diagonal(v) => v.clone(),
                };
                comps.push(GaussianComponent::new(c.weight, c.mean.clone(), var));
                mask.push(c.is_unsafe);
                labels.push(c.label.clone().unwrap_or_else(|| format!("{}/{i}", def.id)));
            }
            let mixture = GaussianMixture::new(comps, mask)
                .map_err(|e| Error::Config(format!("prompt `{}`: {e}", def.id)))?;
            let embedding = def.embedding.clone().unwrap_or_else(|| labels.clone());
            prompts.push(Prompt {
                id: def.id.clone(),
                mixture,
                labels,
                embedding,
            });
        }
        let dim = prompts[0].mixture.dim();
        if let Some(p) = prompts.iter().find(|p| p.mixture.dim() != dim) {
            return Err(Error::Config(format!(
                "prompt `{}` has dimension {}, expected {dim}",
                p.id,
                p.mixture.dim()
            )));
        }
        let share = 1.0 / prompts.len() as f64;
        let mut comps = Vec::new();
        let mut mask = Vec::new();
        for p in &prompts {
            for (c, u) in p.mixture.components().iter().zip(p.mixture.unsafe_mask()) {
                comps.push(GaussianComponent::new(
                    c.weight * share,
                    c.mean.clone(),
                    c.var.clone(),
                ));
                mask.push(*u);
            }
        }
        let unconditional = GaussianMixture::normalized(comps, mask)?;
        let world = Self {
            prompts,
            unconditional,
            active_prompt: spec.prompt.clone(),
            concept: spec.concept.clone(),
        };
        world.prompt(&spec.prompt)?;
        if !world
            .anchor_points()?
            .iter()
            .any(|(l, _)| *l == spec.concept)
        {
            return Err(Error::UnknownConcept(spec.concept.clone()));
        }
        for p in &world.prompts {
            for l in &p.embedding {
                if !p.labels.contains(l) && !world.prompts.iter().any(|q| q.labels.contains(l)) {
                    return Err(Error::UnknownConcept(l.clone()));
                }
            }
        }
        Ok(world)
    }

    pub fn default_world() -> Self {
        Self::from_spec(&WorldSpec::default()).expect("default world is valid")
    }

    pub fn dim(&self) -> usize {
        self.unconditional.dim()
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn prompt(&self, id: &str) -> Result<&Prompt> {
        self.prompts
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::UnknownPrompt(id.to_string()))
    }

    pub fn active_prompt(&self) -> &Prompt {
        self.prompt(&self.active_prompt)
            .expect("validated at construction")
    }

    pub fn concept(&self) -> &str {
        &self.concept
    }

    /// Equal-weight blend of every prompt's conditional mixture.
    pub fn unconditional(&self) -> &GaussianMixture {
        &self.unconditional
    }

    /// One anchor per distinct concept label, in declaration order. A label
    /// shared between prompts must name the same mean everywhere.
    pub fn anchor_points(&self) -> Result<Vec<(String, Vec<f64>)>> {
        let mut out: Vec<(String, Vec<f64>)> = Vec::new();
        for p in &self.prompts {
            for (label, c) in p.labels.iter().zip(p.mixture.components()) {
                match out.iter().find(|(l, _)| l == label) {
                    Some((_, mean)) if *mean != c.mean => {
                        return Err(Error::Config(format!(
                            "label `{label}` is attached to two different means"
                        )))
                    }
                    Some(_) => {}
                    None => out.push((label.clone(), c.mean.clone())),
                }
            }
        }
        Ok(out)
    }

    /// Concept space with the component means (mapped through the decoder)
    /// as anchors.
    pub fn concept_space(&self, temperature: f64, decoder: &LatentDecoder) -> Result<ConceptSpace> {
        decoder.check_latent_dim(self.dim())?;
        let (labels, anchors): (Vec<_>, Vec<_>) = self
            .anchor_points()?
            .into_iter()
            .map(|(l, m)| (l, decoder.decode(&m)))
            .unzip();
        ConceptSpace::new(anchors, labels, temperature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub label: String,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnchorsSpec {
    /// The string `"from-world"`.
    Named(String),
    Explicit(Vec<AnchorSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemanticsSpec {
    pub tau: f64,
    pub anchors: AnchorsSpec,
    /// `"identity"` or `"linear:<json matrix>"`, e.g. `"linear:[[1,0],[0,1],[1,1]]"`.
    pub decoder: String,
}

impl Default for SemanticsSpec {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TEMPERATURE,
            anchors: AnchorsSpec::Named("from-world".into()),
            decoder: "identity".into(),
        }
    }
}

impl SemanticsSpec {
    pub fn decoder(&self) -> Result<LatentDecoder> {
        let d = self.decoder.trim();
        if d == "identity" {
            return Ok(LatentDecoder::Identity);
        }
        if let Some(rest) = d.strip_prefix("linear:") {
            let rows: Vec<Vec<f64>> = serde_json::from_str(rest)
                .map_err(|e| Error::Config(format!("decoder matrix: {e}")))?;
            return LatentDecoder::linear(rows);
        }
        Err(Error::Config(format!("unknown decoder `{d}`")))
    }

    pub fn build(&self, world: &World) -> Result<(ConceptSpace, LatentDecoder)> {
        let decoder = self.decoder()?;
        let space = match &self.anchors {
            AnchorsSpec::Named(name) if name == "from-world" => {
                world.concept_space(self.tau, &decoder)?
            }
            AnchorsSpec::Named(other) => {
                return Err(Error::Config(format!("unknown anchor source `{other}`")))
            }
            AnchorsSpec::Explicit(list) => {
                decoder.check_latent_dim(world.dim())?;
                let image_dim = decoder.image_dim(world.dim());
                if let Some(a) = list.iter().find(|a| a.point.len() != image_dim) {
                    return Err(Error::DimensionMismatch {
                        expected: image_dim,
                        got: a.point.len(),
                    });
                }
                ConceptSpace::new(
                    list.iter().map(|a| a.point.clone()).collect(),
                    list.iter().map(|a| a.label.clone()).collect(),
                    self.tau,
                )?
            }
        };
        Ok((space, decoder))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_world_shape() {
        let w = World::default_world();
        assert_eq!(w.dim(), 2);
        let p = w.active_prompt();
        assert_eq!(p.mixture.len(), 4);
        assert_eq!(p.mixture.unsafe_mask(), &[true, false, false, false]);
        assert_eq!(w.unconditional().len(), 5);
        let total: f64 = w.unconditional().weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((w.unconditional().weights()[4] - 0.5).abs() < 1e-15);
        let space = w.concept_space(1.0, &LatentDecoder::Identity).unwrap();
        assert_eq!(space.len(), 5);
        assert_eq!(space.index_of("c"), Some(0));
    }

    #[test]
    fn linear_decoder_maps_anchors() {
        let w = World::default_world();
        let spec = SemanticsSpec {
            decoder: "linear:[[1,0],[0,1],[0.5,-0.5]]".into(),
            ..SemanticsSpec::default()
        };
        let (space, dec) = spec.build(&w).unwrap();
        assert_eq!(space.image_dim(), 3);
        assert_eq!(dec, LatentDecoder::default_linear());
        assert_eq!(space.anchors()[1], vec![3.0, -3.0, 3.0]);
    }

    #[test]
    fn unknown_references_are_rejected() {
        let spec = WorldSpec {
            prompt: "nope".into(),
            ..WorldSpec::default()
        };
        assert!(matches!(
            World::from_spec(&spec),
            Err(Error::UnknownPrompt(_))
        ));
        let spec = WorldSpec {
            concept: "nope".into(),
            ..WorldSpec::default()
        };
        assert!(matches!(
            World::from_spec(&spec),
            Err(Error::UnknownConcept(_))
        ));
        let mut spec = WorldSpec::default();
        spec.prompts[0].embedding = Some(vec!["zz".into()]);
        assert!(World::from_spec(&spec).is_err());
        assert!(SemanticsSpec {
            decoder: "conv".into(),
            ..SemanticsSpec::default()
        }
        .decoder()
        .is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = WorldSpec::default();
        let json = serde_json::to_string(&spec).unwrap();
        let back: WorldSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let diag: ComponentSpec =
            serde_json::from_str(r#"{"weight":1.0,"mean":[0,0],"var":[1,2]}"#).unwrap();
        assert_eq!(diag.var, VarSpec::Diagonal(vec![1.0, 2.0]));
        assert!(!diag.is_unsafe);
    }
}
