//! Style composition benchmark: a seeded prompt corpus and a crop-and-embed
//! style score.

use std::fmt;

use crate::error::{PdiError, Result};
use crate::io::RgbImage;
use crate::numerics::SeededStream;

pub const STYLES: [&str; 7] = [
    "Lego",
    "Oil-painting",
    "Cyberpunk",
    "Sketch",
    "Pixel-Art",
    "Watercolor",
    "Graffiti",
];
pub const SUBJECTS: [&str; 5] = ["Dog", "Cat", "Robot", "Car", "Unicorn"];
pub const BACKGROUNDS: [&str; 5] = ["forest", "Space", "Desert", "City", "Ruins"];
pub const CORPUS_SIZE: usize = 300;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ScbPrompt {
    pub subject_style: String,
    pub subject: String,
    pub background_style: String,
    pub background: String,
}

impl ScbPrompt {
    pub fn new(
        subject_style: &str,
        subject: &str,
        background_style: &str,
        background: &str,
    ) -> Result<Self> {
        let style = |s: &str| {
            STYLES
                .iter()
                .find(|p| p.eq_ignore_ascii_case(s))
                .map(|p| p.to_string())
                .ok_or_else(|| PdiError::ParseInput(format!("unknown style {s:?}")))
        };
        let (subject_style, background_style) = (style(subject_style)?, style(background_style)?);
        if subject_style == background_style {
            return Err(PdiError::ParseInput(format!(
                "subject and background share the style {subject_style}"
            )));
        }
        let pick = |pool: &[&str], s: &str, what: &str| {
            pool.iter()
                .find(|p| p.eq_ignore_ascii_case(s))
                .map(|p| p.to_string())
                .ok_or_else(|| PdiError::ParseInput(format!("unknown {what} {s:?}")))
        };
        Ok(Self {
            subject_style,
            subject: pick(&SUBJECTS, subject, "subject")?,
            background_style,
            background: pick(&BACKGROUNDS, background, "background")?,
        })
    }

    /// Inverse of [`fmt::Display`].
    pub fn parse_rendered(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.trim().trim_end_matches('.').split_whitespace().collect();
        match words.as_slice() {
            [a, ss, "style", subj, "in", "a", bs, "style", bg] if a.eq_ignore_ascii_case("a") => {
                Self::new(ss, subj, bs, bg)
            }
            _ => Err(PdiError::ParseInput(format!(
                "not a benchmark prompt: {text:?}"
            ))),
        }
    }

    pub fn subject_descriptor(&self) -> String {
        format!("{} style", self.subject_style.to_lowercase())
    }

    pub fn background_descriptor(&self) -> String {
        format!("{} style", self.background_style.to_lowercase())
    }

    /// `(component word, style descriptor)` pairs, subject first.
    pub fn components(&self) -> [(String, String); 2] {
        [
            (self.subject.to_lowercase(), self.subject_descriptor()),
            (self.background.to_lowercase(), self.background_descriptor()),
        ]
    }
}

impl fmt::Display for ScbPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "A {} style {} in a {} style {}.",
            self.subject_style.to_lowercase(),
            self.subject.to_lowercase(),
            self.background_style.to_lowercase(),
            self.background.to_lowercase()
        )
    }
}

/// All 1050 style-distinct tuples, shuffled by `seed`, first 300 kept.
pub fn build_benchmark(seed: u64) -> Vec<ScbPrompt> {
    let mut candidates = Vec::with_capacity(1050);
    for ss in STYLES {
        for subject in SUBJECTS {
            for bs in STYLES {
                if bs == ss {
                    continue;
                }
                for background in BACKGROUNDS {
                    candidates.push(ScbPrompt {
                        subject_style: ss.to_string(),
                        subject: subject.to_string(),
                        background_style: bs.to_string(),
                        background: background.to_string(),
                    });
                }
            }
        }
    }
    let mut stream = SeededStream::new(seed);
    for i in (1..candidates.len()).rev() {
        let j = stream.next_below(i as u64 + 1) as usize;
        candidates.swap(i, j);
    }
    candidates.truncate(CORPUS_SIZE);
    candidates
}

pub fn corpus_text(prompts: &[ScbPrompt]) -> String {
    prompts.iter().map(|p| format!("{p}\n")).collect()
}

pub fn parse_corpus(text: &str) -> Result<Vec<ScbPrompt>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(ScbPrompt::parse_rendered)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentBox {
    pub component: String,
    pub rect: Rect,
}

/// Lines of `component<TAB>x<TAB>y<TAB>w<TAB>h`; blank and `#` lines skipped.
pub fn parse_boxes(text: &str) -> Result<Vec<ComponentBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = || PdiError::Box(format!("line {}: expected component and four integers", n + 1));
        if fields.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
        out.push(ComponentBox {
            component: fields[0].trim().to_lowercase(),
            rect: Rect {
                x: num(fields[1])?,
                y: num(fields[2])?,
                w: num(fields[3])?,
                h: num(fields[4])?,
            },
        });
    }
    Ok(out)
}

pub fn crop(image: &RgbImage, rect: Rect) -> Result<RgbImage> {
    if rect.w == 0 || rect.h == 0 {
        return Err(PdiError::Box(format!("zero-area box {rect:?}")));
    }
    if rect.x + rect.w > image.width || rect.y + rect.h > image.height {
        return Err(PdiError::Box(format!(
            "box {rect:?} exceeds the {}x{} image",
            image.width, image.height
        )));
    }
    let pixels = (0..rect.h)
        .flat_map(|dy| (0..rect.w).map(move |dx| (rect.x + dx, rect.y + dy)))
        .map(|(x, y)| image.get(x, y))
        .collect();
    RgbImage::new(rect.w, rect.h, pixels)
}

pub trait StyleEmbedder {
    fn embed(&self, image: &RgbImage) -> Vec<f64>;
    fn embed_text(&self, descriptor: &str) -> Result<Vec<f64>>;
}

/// Colour histogram plus edge density, matched against procedural style
/// exemplars.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyEmbedder;

const HIST_BINS: usize = 4;
const EDGE_THRESHOLD: f64 = 48.0;
pub const EXEMPLAR_SIZE: usize = 32;

impl StyleEmbedder for ToyEmbedder {
    fn embed(&self, image: &RgbImage) -> Vec<f64> {
        let bins = HIST_BINS * HIST_BINS * HIST_BINS;
        let mut v = vec![0.0; bins + 2];
        let n = image.pixels.len().max(1) as f64;
        for px in &image.pixels {
            let b = |c: u8| c as usize * HIST_BINS / 256;
            v[(b(px[0]) * HIST_BINS + b(px[1])) * HIST_BINS + b(px[2])] += 1.0 / n;
        }
        let luma = |x: usize, y: usize| {
            let p = image.get(x, y);
            0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
        };
        for y in 0..image.height {
            for x in 0..image.width {
                let gx = if x + 1 < image.width { luma(x + 1, y) - luma(x, y) } else { 0.0 };
                let gy = if y + 1 < image.height { luma(x, y + 1) - luma(x, y) } else { 0.0 };
                let edge = (gx * gx + gy * gy).sqrt() > EDGE_THRESHOLD;
                v[bins + usize::from(edge)] += 1.0 / n;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    fn embed_text(&self, descriptor: &str) -> Result<Vec<f64>> {
        Ok(self.embed(&style_exemplar(descriptor_style(descriptor)?, EXEMPLAR_SIZE, EXEMPLAR_SIZE)))
    }
}

/// `"sketch style"` or `"Sketch"` to the pool entry.
pub fn descriptor_style(descriptor: &str) -> Result<&'static str> {
    let word = descriptor.trim();
    let word = word.strip_suffix("style").unwrap_or(word).trim();
    STYLES
        .iter()
        .copied()
        .find(|s| s.eq_ignore_ascii_case(word))
        .ok_or_else(|| PdiError::ParseInput(format!("unknown style descriptor {descriptor:?}")))
}

/// Deterministic texture standing in for a style: a palette and a pattern.
pub fn style_exemplar(style: &str, width: usize, height: usize) -> RgbImage {
    let pixels = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .map(|(x, y)| exemplar_pixel(style, x, y))
        .collect();
    RgbImage {
        width,
        height,
        pixels,
    }
}

fn exemplar_pixel(style: &str, x: usize, y: usize) -> [u8; 3] {
    match style {
        "Lego" => [[220, 30, 30], [250, 210, 20], [20, 70, 200], [30, 150, 60]][(x / 8 + 2 * (y / 8)) % 4],
        "Oil-painting" => {
            let t = ((x + y) % 16) as u8;
            [150 + 3 * t, 95 + 2 * t, 40 + t]
        }
        "Cyberpunk" => {
            if y.is_multiple_of(6) {
                [255, 40, 200]
            } else if x.is_multiple_of(9) {
                [30, 240, 250]
            } else {
                [20, 10, 45]
            }
        }
        "Sketch" => {
            if (x + 2 * y).is_multiple_of(5) {
                [40, 40, 40]
            } else {
                [240, 240, 235]
            }
        }
        "Pixel-Art" => [[90, 40, 140], [60, 200, 90], [250, 250, 120], [20, 20, 60]][(x / 4 + y / 4) % 4],
        "Watercolor" => {
            let t = ((x * 3 + y * 5) % 24) as u8;
            [170 + t, 200 + t / 2, 230]
        }
        "Graffiti" => [[255, 120, 0], [255, 0, 120], [0, 220, 80], [10, 10, 10]][(x / 3 + y / 5) % 4],
        _ => [128, 128, 128],
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn component_score(
    image: &RgbImage,
    rect: Rect,
    descriptor: &str,
    embedder: &dyn StyleEmbedder,
) -> Result<f64> {
    let patch = crop(image, rect)?;
    Ok(cosine(&embedder.embed(&patch), &embedder.embed_text(descriptor)?))
}

pub fn mean_score(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentScore {
    pub component: String,
    /// `None` when no box was supplied for the component.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageReport {
    pub components: Vec<ComponentScore>,
    /// Mean over scored components; `None` when every component is missing.
    pub average: Option<f64>,
}

impl ImageReport {
    pub fn has_missing(&self) -> bool {
        self.components.iter().any(|c| c.score.is_none())
    }
}

/// Scores every component that has a box; missing ones are reported and
/// left out of the average.
pub fn score_image(
    image: &RgbImage,
    prompt: &ScbPrompt,
    boxes: &[ComponentBox],
    embedder: &dyn StyleEmbedder,
) -> Result<ImageReport> {
    let mut components = Vec::new();
    for (component, descriptor) in prompt.components() {
        let score = match boxes.iter().find(|b| b.component == component) {
            Some(b) => Some(component_score(image, b.rect, &descriptor, embedder)?),
            None => None,
        };
        components.push(ComponentScore { component, score });
    }
    let present: Vec<f64> = components.iter().filter_map(|c| c.score).collect();
    let average = (!present.is_empty()).then(|| mean_score(&present));
    Ok(ImageReport {
        components,
        average,
    })
}

/// Strict form: every component must have a box.
pub fn image_score(
    image: &RgbImage,
    prompt: &ScbPrompt,
    boxes: &[ComponentBox],
    embedder: &dyn StyleEmbedder,
) -> Result<f64> {
    let report = score_image(image, prompt, boxes, embedder)?;
    if let Some(missing) = report.components.iter().find(|c| c.score.is_none()) {
        return Err(PdiError::Box(format!("no box for component {:?}", missing.component)));
    }
    Ok(report.average.expect("all components scored"))
}

pub fn report_csv(rows: &[(usize, ImageReport)]) -> String {
    let fmt = |s: Option<f64>| s.map_or_else(|| "missing".to_string(), |v| format!("{v:.6}"));
    let mut out = String::from("prompt_index,component,score\n");
    for (index, report) in rows {
        for c in &report.components {
            out.push_str(&format!("{index},{},{}\n", c.component, fmt(c.score)));
        }
        out.push_str(&format!("{index},AVG,{}\n", fmt(report.average)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn corpus_shape() {
        let corpus = build_benchmark(0);
        assert_eq!(corpus.len(), 300);
        assert_eq!(corpus.iter().collect::<HashSet<_>>().len(), 300);
        assert!(corpus.iter().all(|p| p.subject_style != p.background_style));
        assert_eq!(corpus, build_benchmark(0));
        assert_ne!(corpus, build_benchmark(1));
        for p in &corpus {
            assert_eq!(&ScbPrompt::parse_rendered(&p.to_string()).unwrap(), p);
        }
        assert_eq!(parse_corpus(&corpus_text(&corpus)).unwrap(), corpus);
    }

    #[test]
    fn rendering() {
        let p = ScbPrompt::new("sketch", "robot", "oil-painting", "forest").unwrap();
        assert_eq!(p.to_string(), "A sketch style robot in a oil-painting style forest.");
        assert!(ScbPrompt::new("lego", "dog", "Lego", "city").is_err());
        assert!(ScbPrompt::parse_rendered("a red dog").is_err());
    }

    #[test]
    fn reported_average() {
        assert!((mean_score(&[0.2818, 0.2493]) - 0.26555).abs() < 1e-12);
        assert!((mean_score(&[0.4]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn exemplar_self_similarity() {
        let e = ToyEmbedder;
        for style in STYLES {
            let img = style_exemplar(style, EXEMPLAR_SIZE, EXEMPLAR_SIZE);
            let rect = Rect { x: 0, y: 0, w: EXEMPLAR_SIZE, h: EXEMPLAR_SIZE };
            let s = component_score(&img, rect, &format!("{} style", style.to_lowercase()), &e).unwrap();
            assert!((s - 1.0).abs() < 1e-6, "{style}: {s}");
        }
    }

    #[test]
    fn box_errors() {
        let img = style_exemplar("Sketch", 8, 8);
        let e = ToyEmbedder;
        for rect in [Rect { x: 0, y: 0, w: 0, h: 4 }, Rect { x: 6, y: 0, w: 4, h: 4 }] {
            assert!(matches!(component_score(&img, rect, "sketch style", &e), Err(PdiError::Box(_))));
        }
        assert!(parse_boxes("dog\t1\t2\t3").is_err());
        let boxes = parse_boxes("# c\tx\ty\tw\th\nDog\t0\t0\t4\t4\n").unwrap();
        assert_eq!(boxes[0].component, "dog");
        let prompt = ScbPrompt::new("sketch", "dog", "lego", "city").unwrap();
        assert!(matches!(image_score(&img, &prompt, &boxes, &e), Err(PdiError::Box(_))));
        let report = score_image(&img, &prompt, &boxes, &e).unwrap();
        assert!(report.has_missing());
        assert_eq!(report.average, report.components[0].score);
        let csv = report_csv(&[(3, report)]);
        assert!(csv.lines().last().unwrap().starts_with("3,AVG,"));
        assert!(csv.contains("3,city,missing"));
    }
}
