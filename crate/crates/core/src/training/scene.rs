//! Procedural shapes scenes with exact object masks.

use serde::{Deserialize, Serialize};

use crate::denoiser::tokens::{self, PromptTokens};
use crate::denoiser::IMAGE;
use crate::diffcore::{Rng, Tensor};
use crate::error::{Error, Result};

pub const MIN_SIZE: usize = 4;
pub const MAX_SIZE: usize = 7;
pub const BACKGROUND: f32 = 0.0;
const PLACEMENT_TRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Shape {
    pub fn token(self) -> usize {
        match self {
            Shape::Square => tokens::SQUARE,
            Shape::Disk => tokens::DISK,
        }
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn token(self) -> usize {
        match self {
            Color::Red => tokens::RED,
            Color::Green => tokens::GREEN,
            Color::Blue => tokens::BLUE,
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Top-left pixel of the bounding box (row, column).
    pub origin: (usize, usize),
    pub size: usize,
}

impl SceneObject {
    /// Centre in continuous pixel coordinates (row, column).
    pub fn center(&self) -> (f64, f64) {
        let h = self.size as f64 / 2.0;
        (self.origin.0 as f64 + h, self.origin.1 as f64 + h)
    }

    pub fn covers(&self, row: usize, col: usize) -> bool {
        let (r0, c0) = self.origin;
        let inside_box = (r0..r0 + self.size).contains(&row) && (c0..c0 + self.size).contains(&col);
        match self.shape {
            Shape::Square => inside_box,
            Shape::Disk => {
                let (cy, cx) = self.center();
                let (dy, dx) = (row as f64 + 0.5 - cy, col as f64 + 0.5 - cx);
                let r = self.size as f64 / 2.0;
                inside_box && dy * dy + dx * dx <= r * r
            }
        }
    }

    /// Binary 16×16 mask.
    pub fn mask(&self) -> Tensor {
        Tensor::from_fn(&[IMAGE, IMAGE], |i| {
            if self.covers(i / IMAGE, i % IMAGE) {
                1.0
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub tokens: PromptTokens,
}

impl SceneSpec {
    pub fn new(objects: Vec<SceneObject>) -> Result<Self> {
        if objects.is_empty() || objects.len() > 2 {
            return Err(Error::invalid(format!("scenes hold 1 or 2 objects, got {}", objects.len())));
        }
        let words: Vec<usize> = objects
            .iter()
            .flat_map(|o| [o.color.token(), o.shape.token()])
            .collect();
        let spec = SceneSpec {
            tokens: PromptTokens::from_words(&words)?,
            objects,
        };
        if spec.objects.len() == 2 && overlaps(&spec.objects[0], &spec.objects[1]) {
            return Err(Error::invalid("scene objects overlap"));
        }
        Ok(spec)
    }

    pub fn masks(&self) -> Vec<Tensor> {
        self.objects.iter().map(SceneObject::mask).collect()
    }

    /// Renders `[3,16,16]` in `[−1, 1]`.
    pub fn render(&self) -> Tensor {
        self.render_filtered(None)
    }

    /// Renders the scene with object `skip` removed (background in its place).
    pub fn render_without(&self, skip: usize) -> Result<Tensor> {
        if skip >= self.objects.len() {
            return Err(Error::invalid(format!("object {skip} out of range")));
        }
        Ok(self.render_filtered(Some(skip)))
    }

    fn render_filtered(&self, skip: Option<usize>) -> Tensor {
        let mut img = Tensor::full(&[3, IMAGE, IMAGE], BACKGROUND);
        let data = img.data_mut();
        for (idx, o) in self.objects.iter().enumerate() {
            if Some(idx) == skip {
                continue;
            }
            let rgb = o.color.rgb();
            for r in 0..IMAGE {
                for c in 0..IMAGE {
                    if o.covers(r, c) {
                        for (ch, v) in rgb.iter().enumerate() {
                            data[ch * IMAGE * IMAGE + r * IMAGE + c] = *v;
                        }
                    }
                }
            }
        }
        img
    }

    /// Prompt positions of object `idx`'s words (color, shape).
    pub fn object_positions(&self, idx: usize) -> Result<Vec<usize>> {
        if idx >= self.objects.len() {
            return Err(Error::invalid(format!("object {idx} out of range")));
        }
        Ok(vec![2 * idx, 2 * idx + 1])
    }

    /// The prompt words of object `idx`, e.g. `"red square"`.
    pub fn phrase(&self, idx: usize) -> Result<String> {
        let pos = self.object_positions(idx)?;
        let words: Vec<&str> = pos.iter().map(|&k| crate::denoiser::tokens::word(self.tokens.ids[k])).collect();
        Ok(words.join(" "))
    }

    /// Object whose words match `phrase`, e.g. `"red square"` or `"disk"`.
    pub fn find_object(&self, phrase: &str) -> Result<usize> {
        let pos = self.tokens.find_phrase(phrase)?;
        Ok(pos[0] / 2)
    }
}

fn overlaps(a: &SceneObject, b: &SceneObject) -> bool {
    (0..IMAGE * IMAGE).any(|i| a.covers(i / IMAGE, i % IMAGE) && b.covers(i / IMAGE, i % IMAGE))
}

fn random_object(rng: &mut Rng, shape: Shape, color: Color, size: usize) -> SceneObject {
    let span = IMAGE - size + 1;
    SceneObject {
        shape,
        color,
        origin: (rng.below(span), rng.below(span)),
        size,
    }
}

fn random_shape(rng: &mut Rng) -> Shape {
    if rng.coin(0.5) {
        Shape::Square
    } else {
        Shape::Disk
    }
}

/// Draws a scene: one or two objects (fair coin), distinct colours when there
/// are two, sizes 4–7 px, placements rejection-sampled until disjoint.
pub fn gen_scene(rng: &mut Rng) -> SceneSpec {
    let two = rng.coin(0.5);
    let c0 = Color::ALL[rng.below(3)];
    let s0 = random_shape(rng);
    if !two {
        let size = MIN_SIZE + rng.below(MAX_SIZE - MIN_SIZE + 1);
        let o = random_object(rng, s0, c0, size);
        return SceneSpec::new(vec![o]).expect("single object scene");
    }
    let others: Vec<Color> = Color::ALL.iter().copied().filter(|&c| c != c0).collect();
    let c1 = others[rng.below(2)];
    let s1 = random_shape(rng);
    loop {
        let size0 = MIN_SIZE + rng.below(MAX_SIZE - MIN_SIZE + 1);
        let size1 = MIN_SIZE + rng.below(MAX_SIZE - MIN_SIZE + 1);
        for _ in 0..PLACEMENT_TRIES {
            let a = random_object(rng, s0, c0, size0);
            let b = random_object(rng, s1, c1, size1);
            if !overlaps(&a, &b) {
                return SceneSpec::new(vec![a, b]).expect("disjoint two object scene");
            }
        }
    }
}

/// Draws two-object scenes only (for erasure suites).
pub fn gen_two_object_scene(rng: &mut Rng) -> SceneSpec {
    loop {
        let s = gen_scene(rng);
        if s.objects.len() == 2 {
            return s;
        }
    }
}
