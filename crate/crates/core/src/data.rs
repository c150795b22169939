//! Synthetic scenes with exactly derivable captions, questions and per-cell
//! labels, plus dataset I/O (PPM images and a JSON-lines manifest).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vision::{Image, GRID_STRIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

/// Background plus one class per (shape, color) pair.
pub const NUM_CELL_CLASSES: usize = 1 + 3 * 4;
pub const BACKGROUND_CLASS: u8 = 0;

pub fn cell_class(shape: Shape, color: Color) -> u8 {
    1 + (shape as u8) * 4 + color as u8
}

pub fn class_parts(class: u8) -> Option<(Shape, Color)> {
    if class == 0 || class as usize >= NUM_CELL_CLASSES {
        return None;
    }
    let i = (class - 1) as usize;
    Some((Shape::ALL[i / 4], Color::ALL[i % 4]))
}

pub const MIN_OBJECT_SIZE: usize = 14;
pub const MAX_OBJECT_SIZE: usize = 28;
pub const MAX_OBJECTS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
    /// Side length in pixels.
    pub size: usize,
    /// Top-left pixel of the object's bounding square.
    pub y: usize,
    pub x: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Objects in row-major cell order.
    pub objects: Vec<SceneObject>,
    pub background: [f32; 3],
}

impl SceneSpec {
    pub fn cell_labels(&self) -> Vec<Vec<u8>> {
        let mut labels = vec![vec![BACKGROUND_CLASS; self.grid_cols]; self.grid_rows];
        for o in &self.objects {
            labels[o.row][o.col] = cell_class(o.shape, o.color);
        }
        labels
    }

    pub fn count_shape(&self, shape: Shape) -> usize {
        self.objects.iter().filter(|o| o.shape == shape).count()
    }

    pub fn contains(&self, shape: Shape, color: Color) -> bool {
        self.objects.iter().any(|o| o.shape == shape && o.color == color)
    }

    pub fn render(&self) -> Result<Image> {
        let mut img = Image::filled(
            self.grid_rows * GRID_STRIDE,
            self.grid_cols * GRID_STRIDE,
            self.background,
        )?;
        for o in &self.objects {
            for dy in 0..o.size {
                for dx in 0..o.size {
                    if covers(o.shape, o.size, dy, dx) {
                        img.set_pixel(o.y + dy, o.x + dx, o.color.rgb());
                    }
                }
            }
        }
        Ok(img)
    }
}

/// Whether the pixel at offset (dy, dx) inside an object's bounding square
/// is filled, sampling at the pixel centre.
fn covers(shape: Shape, size: usize, dy: usize, dx: usize) -> bool {
    let (py, px) = (dy as f64 + 0.5, dx as f64 + 0.5);
    let s = size as f64;
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let r = s / 2.0;
            (py - r).powi(2) + (px - r).powi(2) <= r * r
        }
        // apex at the top centre, base along the bottom edge
        Shape::Triangle => (px - s / 2.0).abs() <= py / 2.0,
    }
}

pub fn generate_scene_with_count<R: Rng + ?Sized>(
    rng: &mut R,
    image_h: usize,
    image_w: usize,
    count: usize,
) -> Result<(SceneSpec, Image)> {
    if image_h == 0 || image_w == 0 || !image_h.is_multiple_of(GRID_STRIDE) || !image_w.is_multiple_of(GRID_STRIDE) {
        return Err(Error::Invalid(format!(
            "scene size {image_h}x{image_w} must be a positive multiple of {GRID_STRIDE}"
        )));
    }
    let (rows, cols) = (image_h / GRID_STRIDE, image_w / GRID_STRIDE);
    if count == 0 || count > rows * cols {
        return Err(Error::Invalid(format!(
            "cannot place {count} objects on a {rows}x{cols} grid"
        )));
    }
    let mut cells: Vec<usize> = (0..rows * cols).collect();
    cells.shuffle(rng);
    let mut chosen = cells[..count].to_vec();
    chosen.sort_unstable();
    let objects = chosen
        .into_iter()
        .map(|cell| {
            let (row, col) = (cell / cols, cell % cols);
            let shape = Shape::ALL[rng.gen_range(0..3)];
            let color = Color::ALL[rng.gen_range(0..4)];
            let size = rng.gen_range(MIN_OBJECT_SIZE..=MAX_OBJECT_SIZE);
            let y = row * GRID_STRIDE + rng.gen_range(0..=GRID_STRIDE - size);
            let x = col * GRID_STRIDE + rng.gen_range(0..=GRID_STRIDE - size);
            SceneObject {
                shape,
                color,
                row,
                col,
                size,
                y,
                x,
            }
        })
        .collect();
    // 8-bit representable so that PPM round trips are exact
    let grey = rng.gen_range(13u8..90) as f32 / 255.0;
    let scene = SceneSpec {
        grid_rows: rows,
        grid_cols: cols,
        objects,
        background: [grey; 3],
    };
    let img = scene.render()?;
    Ok((scene, img))
}

/// Random scene with between one and three objects on distinct cells.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, image_h: usize, image_w: usize) -> Result<(SceneSpec, Image)> {
    let cells = (image_h / GRID_STRIDE) * (image_w / GRID_STRIDE);
    let max = MAX_OBJECTS.min(cells.max(1));
    let count = rng.gen_range(1..=max);
    generate_scene_with_count(rng, image_h, image_w, count)
}

/// Recomputes per-cell labels from pixels alone: colour from the saturated
/// pixels of a cell, shape from how much of their bounding box they fill.
pub fn verify_cell_labels(img: &Image) -> Result<Vec<Vec<u8>>> {
    let (rows, cols) = img
        .grid_dims()
        .ok_or_else(|| Error::Invalid("image sides must be stride multiples".into()))?;
    let mut labels = vec![vec![BACKGROUND_CLASS; cols]; rows];
    for (r, row) in labels.iter_mut().enumerate() {
        for (c, label) in row.iter_mut().enumerate() {
            let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
            let mut count = 0usize;
            let mut rgb = [0.0f32; 3];
            for y in r * GRID_STRIDE..(r + 1) * GRID_STRIDE {
                for x in c * GRID_STRIDE..(c + 1) * GRID_STRIDE {
                    let p = img.pixel(y, x);
                    let spread = p.iter().copied().fold(f32::MIN, f32::max)
                        - p.iter().copied().fold(f32::MAX, f32::min);
                    if spread > 0.5 {
                        count += 1;
                        rgb = p;
                        (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
                    }
                }
            }
            if count == 0 {
                continue;
            }
            let color = match (rgb[0] > 0.5, rgb[1] > 0.5, rgb[2] > 0.5) {
                (true, true, false) => Color::Yellow,
                (true, false, false) => Color::Red,
                (false, true, false) => Color::Green,
                (false, false, true) => Color::Blue,
                _ => return Err(Error::Invalid(format!("unrecognised colour {rgb:?} in cell ({r},{c})"))),
            };
            let fill = count as f64 / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            let shape = if fill > 0.9 {
                Shape::Square
            } else if fill > 0.65 {
                Shape::Circle
            } else {
                Shape::Triangle
            };
            *label = cell_class(shape, color);
        }
    }
    Ok(labels)
}

fn object_phrase(o: &SceneObject) -> String {
    format!("a {} {}", o.color.word(), o.shape.word())
}

/// Caption listing every object in row-major order, optionally prefixed by
/// "there is".
pub fn render_caption<R: Rng + ?Sized>(scene: &SceneSpec, rng: &mut R) -> String {
    let body = scene
        .objects
        .iter()
        .map(object_phrase)
        .collect::<Vec<_>>()
        .join(" and ");
    if rng.gen_bool(0.5) {
        format!("there is {body}")
    } else {
        body
    }
}

/// Closed answer vocabulary for the question-answering task.
pub const ANSWERS: [&str; 9] = ["red", "green", "blue", "yellow", "one", "two", "three", "yes", "no"];

pub fn answer_id(answer: &str) -> Option<usize> {
    ANSWERS.iter().position(|a| *a == answer)
}

const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuestionKind {
    Color,
    Count,
    Exists,
}

pub fn generate_qa<R: Rng + ?Sized>(scene: &SceneSpec, rng: &mut R) -> (String, String) {
    let unique: Vec<&SceneObject> = scene
        .objects
        .iter()
        .filter(|o| scene.count_shape(o.shape) == 1)
        .collect();
    let mut kinds = vec![QuestionKind::Count, QuestionKind::Exists];
    if !unique.is_empty() {
        kinds.push(QuestionKind::Color);
    }
    match kinds[rng.gen_range(0..kinds.len())] {
        QuestionKind::Color => {
            let o = unique[rng.gen_range(0..unique.len())];
            (
                format!("what color is the {}", o.shape.word()),
                o.color.word().to_string(),
            )
        }
        QuestionKind::Count => {
            let n = scene.objects.len().clamp(1, 3);
            ("how many objects are there".to_string(), COUNT_WORDS[n - 1].to_string())
        }
        QuestionKind::Exists => {
            let absent: Vec<(Shape, Color)> = Shape::ALL
                .iter()
                .flat_map(|s| Color::ALL.iter().map(move |c| (*s, *c)))
                .filter(|(s, c)| !scene.contains(*s, *c))
                .collect();
            let (shape, color, answer) = if rng.gen_bool(0.5) || absent.is_empty() {
                let o = &scene.objects[rng.gen_range(0..scene.objects.len())];
                (o.shape, o.color, "yes")
            } else {
                let (s, c) = absent[rng.gen_range(0..absent.len())];
                (s, c, "no")
            };
            (
                format!("is there a {} {}", color.word(), shape.word()),
                answer.to_string(),
            )
        }
    }
}

/// Every word the caption and question templates can emit.
pub fn grammar_terminals() -> Vec<&'static str> {
    let mut words = vec![
        "a", "and", "there", "is", "what", "color", "the", "how", "many", "objects", "are",
    ];
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.extend(Shape::ALL.iter().map(|s| s.word()));
    words.sort_unstable();
    words.dedup();
    words
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Caption,
    Qa,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: RecordKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub cell_labels: Vec<Vec<u8>>,
}

impl Record {
    fn validate(&self) -> Result<()> {
        match (self.kind, &self.answer) {
            (RecordKind::Caption, Some(_)) => Err(Error::format("manifest", format!("caption {} has an answer", self.id))),
            (RecordKind::Qa, None) => Err(Error::format("manifest", format!("qa record {} lacks an answer", self.id))),
            (RecordKind::Qa, Some(a)) if answer_id(a).is_none() => {
                Err(Error::format("manifest", format!("unknown answer {a:?} in {}", self.id)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub record: Record,
    pub image: Image,
}

fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Deterministic sample for `(seed, index)`: even indices are captions, odd
/// indices are questions.
pub fn generate_sample(seed: u64, index: u64, image_h: usize, image_w: usize) -> Result<Sample> {
    let mut rng = record_rng(seed, index);
    let (scene, image) = generate_scene(&mut rng, image_h, image_w)?;
    let (kind, text, answer) = if index.is_multiple_of(2) {
        (RecordKind::Caption, render_caption(&scene, &mut rng), None)
    } else {
        let (q, a) = generate_qa(&scene, &mut rng);
        (RecordKind::Qa, q, Some(a))
    };
    Ok(Sample {
        record: Record {
            id: format!("{index:06}"),
            kind,
            text,
            answer,
            cell_labels: scene.cell_labels(),
        },
        image,
    })
}

pub fn generate_split(seed: u64, count: usize, image_h: usize, image_w: usize) -> Result<Vec<Sample>> {
    (0..count as u64)
        .map(|i| generate_sample(seed, i, image_h, image_w))
        .collect()
}

pub const MANIFEST: &str = "manifest.jsonl";

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

pub fn write_dataset(root: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    let dir = split_dir(root, split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let manifest = dir.join(MANIFEST);
    let mut out = std::io::BufWriter::new(fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?);
    for s in samples {
        s.image.write_ppm(&dir.join(format!("{}.ppm", s.record.id)))?;
        let line = serde_json::to_string(&s.record).map_err(|e| Error::format("manifest", e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(&manifest, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest, e))
}

/// Loads a split, sorted by record id.
pub fn read_dataset(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let dir = split_dir(root, split);
    let manifest = dir.join(MANIFEST);
    let file = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut samples = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| Error::format("manifest", format!("line {}: {e}", n + 1)))?;
        record.validate()?;
        let image = Image::read_ppm(&dir.join(format!("{}.ppm", record.id)))?;
        samples.push(Sample { record, image });
    }
    samples.sort_by(|a, b| a.record.id.cmp(&b.record.id));
    Ok(samples)
}
