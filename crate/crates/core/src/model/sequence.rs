use super::routing::{build_routing, Modality, RoutingTable};
use crate::error::{Error, Result};

/// One sequence position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Item {
    /// Plain vocabulary token.
    Token(usize),
    /// The concept identifier row.
    Sks,
    /// Understanding concept slot `i` (0-based, excludes the identifier row).
    Und(usize),
    /// Generation concept slot `j`.
    Gen(usize),
    /// Patch `block` of image input `image`.
    Patch { image: usize, block: usize },
}

impl Item {
    pub fn modality(self) -> Modality {
        match self {
            Item::Token(_) => Modality::Text,
            Item::Sks | Item::Und(_) => Modality::UndToken,
            Item::Gen(_) => Modality::GenToken,
            Item::Patch { .. } => Modality::ImageLatent,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    pub latent: Vec<f64>,
    /// Flow time of the latent; clean images use 0.
    pub t: f64,
}

/// A token sequence with its position embeddings indices and visibility.
///
/// Row `i` may attend to every row `j < horizon[i]`. Text rows are causal;
/// the patches of one image see each other and everything before them.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub items: Vec<Item>,
    pub pos: Vec<Option<usize>>,
    pub horizon: Vec<usize>,
    pub images: Vec<ImageInput>,
    next_pos: usize,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn tags(&self) -> Vec<Modality> {
        self.items.iter().map(|i| i.modality()).collect()
    }

    pub fn routing(&self) -> RoutingTable {
        build_routing(&self.tags())
    }

    /// Rows holding the patches of image `image`, in block order.
    pub fn image_rows(&self, image: usize) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| matches!(it, Item::Patch { image: i, .. } if *i == image))
            .map(|(r, _)| r)
            .collect()
    }

    pub fn next_pos(&self) -> usize {
        self.next_pos
    }

    /// Concatenate `self` and `rest`, offsetting `rest`'s horizons and image ids.
    pub fn concat(&self, rest: &Sequence) -> Sequence {
        let off = self.len();
        let img_off = self.images.len();
        let mut out = self.clone();
        out.items.extend(rest.items.iter().map(|it| match *it {
            Item::Patch { image, block } => Item::Patch {
                image: image + img_off,
                block,
            },
            other => other,
        }));
        out.pos.extend_from_slice(&rest.pos);
        out.horizon.extend(rest.horizon.iter().map(|h| h + off));
        out.images.extend(rest.images.iter().cloned());
        out.next_pos = rest.next_pos;
        out
    }

    /// Dense `L × L` visibility mask.
    pub fn mask(&self) -> Vec<bool> {
        let l = self.len();
        let mut m = vec![false; l * l];
        for i in 0..l {
            for j in 0..self.horizon[i] {
                m[i * l + j] = true;
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct SequenceBuilder {
    seq: Sequence,
    positional: bool,
    sks_token: Option<usize>,
}

impl SequenceBuilder {
    /// Text gets learned position indices starting at 0.
    pub fn new() -> Self {
        Self {
            seq: Sequence {
                items: Vec::new(),
                pos: Vec::new(),
                horizon: Vec::new(),
                images: Vec::new(),
                next_pos: 0,
            },
            positional: true,
            sks_token: None,
        }
    }

    /// Builder for a system prompt: no position embeddings.
    pub fn unpositioned() -> Self {
        Self {
            positional: false,
            ..Self::new()
        }
    }

    /// Continue position numbering after `prev` (used for a cached prefix).
    pub fn continuing(prev: &Sequence) -> Self {
        let mut b = Self::new();
        b.seq.next_pos = prev.next_pos;
        b
    }

    /// Vocabulary id that should be bound to the concept identifier row.
    pub fn sks_token(mut self, id: usize) -> Self {
        self.sks_token = Some(id);
        self
    }

    fn push(&mut self, item: Item, text_like: bool) {
        let i = self.seq.items.len();
        self.seq.items.push(item);
        let pos = if text_like && self.positional {
            self.seq.next_pos += 1;
            Some(self.seq.next_pos - 1)
        } else {
            None
        };
        self.seq.pos.push(pos);
        self.seq.horizon.push(i + 1);
    }

    pub fn token(&mut self, id: usize) -> &mut Self {
        if Some(id) == self.sks_token {
            self.push(Item::Sks, true);
        } else {
            self.push(Item::Token(id), true);
        }
        self
    }

    pub fn tokens(&mut self, ids: &[usize]) -> &mut Self {
        for &id in ids {
            self.token(id);
        }
        self
    }

    pub fn sks(&mut self) -> &mut Self {
        self.push(Item::Sks, true);
        self
    }

    pub fn und_slot(&mut self, i: usize) -> &mut Self {
        self.push(Item::Und(i), false);
        self
    }

    pub fn gen_slot(&mut self, j: usize) -> &mut Self {
        self.push(Item::Gen(j), false);
        self
    }

    /// Append an image as `n_patches` consecutive patch rows.
    pub fn image(&mut self, latent: Vec<f64>, t: f64, n_patches: usize) -> Result<&mut Self> {
        if n_patches == 0 || latent.len() % n_patches != 0 {
            return Err(Error::Shape(format!(
                "latent of {} values cannot be split into {n_patches} patches",
                latent.len()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
        }
        let image = self.seq.images.len();
        self.seq.images.push(ImageInput { latent, t });
        let start = self.seq.items.len();
        for block in 0..n_patches {
            self.push(Item::Patch { image, block }, false);
        }
        let end = self.seq.items.len();
        for h in &mut self.seq.horizon[start..end] {
            *h = end;
        }
        Ok(self)
    }

    pub fn build(&self) -> Sequence {
        self.seq.clone()
    }
}

impl Default for SequenceBuilder {
    fn default() -> Self {
        Self::new()
    }
}
