use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Lanes;

/// Per-position type tag that decides the expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    UndToken,
    GenToken,
    ImageLatent,
}

impl Modality {
    pub fn lane(self) -> u8 {
        match self {
            Modality::Text | Modality::UndToken => super::UND,
            Modality::GenToken | Modality::ImageLatent => super::GEN,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::UndToken => "und_token",
            Modality::GenToken => "gen_token",
            Modality::ImageLatent => "image_latent",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "und_token" => Ok(Modality::UndToken),
            "gen_token" => Ok(Modality::GenToken),
            "image_latent" => Ok(Modality::ImageLatent),
            other => Err(Error::Routing(format!("unknown modality tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingTable {
    pub und: Vec<usize>,
    pub gen: Vec<usize>,
}

impl RoutingTable {
    pub fn len(&self) -> usize {
        self.und.len() + self.gen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lanes(&self) -> Lanes {
        let mut lanes = vec![super::UND; self.len()];
        for &j in &self.gen {
            lanes[j] = super::GEN;
        }
        Lanes::new(lanes).expect("lane ids are 0/1")
    }
}

pub fn build_routing(tags: &[Modality]) -> RoutingTable {
    let mut table = RoutingTable {
        und: Vec::new(),
        gen: Vec::new(),
    };
    for (i, tag) in tags.iter().enumerate() {
        if tag.lane() == super::UND {
            table.und.push(i);
        } else {
            table.gen.push(i);
        }
    }
    table
}

/// Parse string tags (as stored in dataset files) and route them.
pub fn build_routing_from_tags(tags: &[&str]) -> Result<RoutingTable> {
    let parsed = tags.iter().map(|t| t.parse()).collect::<Result<Vec<Modality>>>()?;
    Ok(build_routing(&parsed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Modality::*;

    #[test]
    fn template_routing() {
        // <sks> is <und_1> <und_2> <gen_1> <gen_2> .
        let tags = [UndToken, Text, UndToken, UndToken, GenToken, GenToken, Text];
        let r = build_routing(&tags);
        assert_eq!(r.und, vec![0, 1, 2, 3, 6]);
        assert_eq!(r.gen, vec![4, 5]);
    }

    #[test]
    fn degenerate_sequences() {
        let r = build_routing(&[Text; 5]);
        assert_eq!(r.und, vec![0, 1, 2, 3, 4]);
        assert!(r.gen.is_empty());
        let r = build_routing(&[ImageLatent; 4]);
        assert_eq!(r.gen, vec![0, 1, 2, 3]);
        assert!(r.und.is_empty());
    }

    #[test]
    fn unknown_tag_is_a_routing_error() {
        assert!(matches!(
            build_routing_from_tags(&["text", "audio"]),
            Err(Error::Routing(_))
        ));
        let r = build_routing_from_tags(&["gen_token", "text"]).unwrap();
        assert_eq!(r.gen, vec![0]);
    }

    proptest! {
        #[test]
        fn routing_partitions_positions(raw in proptest::collection::vec(0u8..4, 0..40)) {
            let tags: Vec<Modality> = raw.iter().map(|&k| [Text, UndToken, GenToken, ImageLatent][k as usize]).collect();
            let r = build_routing(&tags);
            let mut all: Vec<usize> = r.und.iter().chain(&r.gen).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..tags.len()).collect::<Vec<_>>());
            prop_assert!(r.und.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(r.gen.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
