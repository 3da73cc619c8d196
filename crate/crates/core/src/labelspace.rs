//! Ground-truth label semantics.
//!
//! Every dataset annotation is decoded through a [`RawAnnotationCodec`] into
//! [`RawClass`] values and then relabeled onto the three-valued [`Label`]
//! alphabet used by the losses, the metrics and the training loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel ground truth after relabeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Static = 0,
    Motion = 1,
    Ignore = 2,
}

impl Label {
    /// 8-bit encoding used when a relabeled mask is written to disk. Matches
    /// the default CDNet codec so written masks can be read back with it.
    pub fn to_gray(self) -> u8 {
        match self {
            Label::Static => 0,
            Label::Motion => 255,
            Label::Ignore => 170,
        }
    }
}

/// A relabeled ground-truth frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label buffer has {} entries, expected {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: Label) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [Label] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: Label) {
        self.labels[y * self.width + x] = label;
    }

    pub fn counts(&self) -> LabelCounts {
        let mut counts = LabelCounts::default();
        for label in &self.labels {
            match label {
                Label::Static => counts.static_ += 1,
                Label::Motion => counts.motion += 1,
                Label::Ignore => counts.ignore += 1,
            }
        }
        counts
    }

    /// Gray-level encoding of the mask, row-major.
    pub fn to_gray(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.to_gray()).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub static_: usize,
    pub motion: usize,
    pub ignore: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.static_ + self.motion + self.ignore
    }
}

/// Fraction of pixels carrying the ignore label.
pub fn ignore_fraction(mask: &LabelMask) -> f64 {
    let total = mask.height * mask.width;
    if total == 0 {
        return 0.0;
    }
    mask.counts().ignore as f64 / total as f64
}

/// Annotation classes as they appear in the raw dataset files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawClass {
    Static,
    HardShadow,
    OutsideRoi,
    Unknown,
    Motion,
    /// Object instance id of multi-object datasets.
    Instance(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    Cdnet,
    Lasiesta,
    Synthetic,
}

/// A raw annotation image, one RGB triple per pixel. Single-channel masks
/// are stored with the gray value replicated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawAnnotationMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RawAnnotationMask {
    pub fn from_gray(height: usize, width: usize, gray: &[u8]) -> Result<Self> {
        if gray.len() != height * width {
            return Err(Error::Shape(format!(
                "gray buffer has {} entries, expected {}x{}",
                gray.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            pixels: gray.iter().map(|&v| [v, v, v]).collect(),
        })
    }

    pub fn from_rgb(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "rgb buffer has {} bytes, expected {}x{}x3",
                rgb.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            pixels: rgb.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect(),
        })
    }
}

/// Mapping from raw pixel encodings to annotation classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotationCodec {
    pub source: AnnotationSource,
    /// Keys are RGB triples; gray encodings use `[v, v, v]`.
    #[serde(with = "value_map_serde")]
    pub value_map: BTreeMap<[u8; 3], RawClass>,
}

impl RawAnnotationCodec {
    /// Default CDNet grayscale convention.
    pub fn cdnet() -> Self {
        let value_map = [
            (0u8, RawClass::Static),
            (50, RawClass::HardShadow),
            (85, RawClass::OutsideRoi),
            (170, RawClass::Unknown),
            (255, RawClass::Motion),
        ]
        .into_iter()
        .map(|(v, c)| ([v, v, v], c))
        .collect();
        Self {
            source: AnnotationSource::Cdnet,
            value_map,
        }
    }

    /// Default LASIESTA color convention: black background, red/green/yellow
    /// for up to three object instances, white for uncertain pixels.
    pub fn lasiesta() -> Self {
        let value_map = [
            ([0, 0, 0], RawClass::Static),
            ([255, 0, 0], RawClass::Instance(1)),
            ([0, 255, 0], RawClass::Instance(2)),
            ([255, 255, 0], RawClass::Instance(3)),
            ([255, 255, 255], RawClass::Unknown),
        ]
        .into_iter()
        .collect();
        Self {
            source: AnnotationSource::Lasiesta,
            value_map,
        }
    }

    /// Codec for masks written by this crate (see [`Label::to_gray`]).
    pub fn synthetic() -> Self {
        let value_map = [
            (0u8, RawClass::Static),
            (170, RawClass::Unknown),
            (255, RawClass::Motion),
        ]
        .into_iter()
        .map(|(v, c)| ([v, v, v], c))
        .collect();
        Self {
            source: AnnotationSource::Synthetic,
            value_map,
        }
    }

    pub fn for_source(source: AnnotationSource) -> Self {
        match source {
            AnnotationSource::Cdnet => Self::cdnet(),
            AnnotationSource::Lasiesta => Self::lasiesta(),
            AnnotationSource::Synthetic => Self::synthetic(),
        }
    }

    /// Decode every pixel, failing on the first undeclared value.
    pub fn decode(&self, raw: &RawAnnotationMask) -> Result<Vec<RawClass>> {
        raw.pixels
            .iter()
            .enumerate()
            .map(|(i, value)| {
                self.value_map.get(value).copied().ok_or(Error::Decode {
                    value: *value,
                    x: i % raw.width,
                    y: i / raw.width,
                })
            })
            .collect()
    }
}

mod value_map_serde {
    use super::RawClass;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        value: [u8; 3],
        class: RawClass,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<[u8; 3], RawClass>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(value, class)| Entry {
                value: *value,
                class: *class,
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<[u8; 3], RawClass>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries.into_iter().map(|e| (e.value, e.class)).collect())
    }
}

/// Relabel rule shared by all sources.
fn relabel_class(class: RawClass) -> Label {
    match class {
        RawClass::Static | RawClass::HardShadow => Label::Static,
        RawClass::Motion | RawClass::Instance(_) => Label::Motion,
        RawClass::Unknown | RawClass::OutsideRoi => Label::Ignore,
    }
}

/// Decode `raw` with `codec` and map it onto the three-valued alphabet.
pub fn relabel(raw: &RawAnnotationMask, codec: &RawAnnotationCodec) -> Result<LabelMask> {
    let classes = codec.decode(raw)?;
    LabelMask::new(
        raw.height,
        raw.width,
        classes.into_iter().map(relabel_class).collect(),
    )
}

/// CDNet relabeling: hard shadow becomes static, unknown and outside-ROI
/// become ignore.
pub fn relabel_cdnet(raw: &RawAnnotationMask, codec: &RawAnnotationCodec) -> Result<LabelMask> {
    if codec.source != AnnotationSource::Cdnet && codec.source != AnnotationSource::Synthetic {
        return Err(Error::Config(format!(
            "relabel_cdnet needs a CDNet codec, got {:?}",
            codec.source
        )));
    }
    relabel(raw, codec)
}

/// LASIESTA relabeling: every object instance becomes motion.
pub fn relabel_lasiesta(raw: &RawAnnotationMask, codec: &RawAnnotationCodec) -> Result<LabelMask> {
    if codec.source != AnnotationSource::Lasiesta {
        return Err(Error::Config(format!(
            "relabel_lasiesta needs a LASIESTA codec, got {:?}",
            codec.source
        )));
    }
    relabel(raw, codec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(values: &[u8], width: usize) -> RawAnnotationMask {
        RawAnnotationMask::from_gray(values.len() / width, width, values).unwrap()
    }

    #[test]
    fn cdnet_hard_shadow_becomes_static() {
        let mask = relabel_cdnet(&gray(&[50], 1), &RawAnnotationCodec::cdnet()).unwrap();
        assert_eq!(mask.labels(), &[Label::Static]);
    }

    #[test]
    fn cdnet_full_table() {
        let mask = relabel_cdnet(&gray(&[0, 50, 85, 170, 255], 5), &RawAnnotationCodec::cdnet())
            .unwrap();
        assert_eq!(
            mask.labels(),
            &[
                Label::Static,
                Label::Static,
                Label::Ignore,
                Label::Ignore,
                Label::Motion
            ]
        );
    }

    #[test]
    fn cdnet_outside_roi_frame_is_all_ignore() {
        let mask = relabel_cdnet(&gray(&[85; 12], 4), &RawAnnotationCodec::cdnet()).unwrap();
        assert_eq!(ignore_fraction(&mask), 1.0);
    }

    #[test]
    fn undeclared_value_names_value_and_location() {
        let err = relabel_cdnet(&gray(&[0, 0, 0, 0, 0, 12], 3), &RawAnnotationCodec::cdnet())
            .unwrap_err();
        match err {
            Error::Decode { value, x, y } => {
                assert_eq!(value, [12, 12, 12]);
                assert_eq!((x, y), (2, 1));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn lasiesta_instances_are_motion() {
        let rgb = [255, 0, 0, 0, 255, 0, 0, 0, 0, 255, 255, 255];
        let raw = RawAnnotationMask::from_rgb(1, 4, &rgb).unwrap();
        let mask = relabel_lasiesta(&raw, &RawAnnotationCodec::lasiesta()).unwrap();
        assert_eq!(
            mask.labels(),
            &[Label::Motion, Label::Motion, Label::Static, Label::Ignore]
        );
    }

    #[test]
    fn lasiesta_motion_set_is_union_of_instances() {
        // instances 1 and 3 in disjoint regions plus background
        let (h, w) = (6, 7);
        let mut rgb = vec![0u8; h * w * 3];
        let mut expected = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let color = if x < 2 && y < 3 {
                    Some([255, 0, 0])
                } else if x >= 5 {
                    Some([255, 255, 0])
                } else {
                    None
                };
                if let Some(c) = color {
                    rgb[i * 3..i * 3 + 3].copy_from_slice(&c);
                    expected[i] = true;
                }
            }
        }
        let raw = RawAnnotationMask::from_rgb(h, w, &rgb).unwrap();
        let mask = relabel_lasiesta(&raw, &RawAnnotationCodec::lasiesta()).unwrap();
        let got: Vec<bool> = mask.labels().iter().map(|&l| l == Label::Motion).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn lasiesta_rejects_wrong_codec() {
        let raw = gray(&[0], 1);
        assert!(relabel_lasiesta(&raw, &RawAnnotationCodec::cdnet()).is_err());
    }

    #[test]
    fn ignore_fraction_examples() {
        assert_eq!(ignore_fraction(&LabelMask::filled(3, 3, Label::Static)), 0.0);
        assert_eq!(ignore_fraction(&LabelMask::filled(3, 3, Label::Ignore)), 1.0);
        let mask = LabelMask::new(
            2,
            2,
            vec![Label::Ignore, Label::Static, Label::Ignore, Label::Motion],
        )
        .unwrap();
        assert_eq!(ignore_fraction(&mask), 0.5);
    }

    #[test]
    fn codec_serde_round_trip() {
        let codec = RawAnnotationCodec::lasiesta();
        let json = serde_json::to_string(&codec).unwrap();
        let back: RawAnnotationCodec = serde_json::from_str(&json).unwrap();
        assert_eq!(codec, back);
    }

    fn label_strategy() -> impl Strategy<Value = Label> {
        prop_oneof![Just(Label::Static), Just(Label::Motion), Just(Label::Ignore)]
    }

    proptest! {
        #[test]
        fn relabel_is_idempotent_through_written_encoding(
            labels in proptest::collection::vec(label_strategy(), 1..64)
        ) {
            let w = labels.len();
            let mask = LabelMask::new(1, w, labels).unwrap();
            let raw = RawAnnotationMask::from_gray(1, w, &mask.to_gray()).unwrap();
            let again = relabel_cdnet(&raw, &RawAnnotationCodec::cdnet()).unwrap();
            prop_assert_eq!(&again, &mask);
            let counts = again.counts();
            prop_assert_eq!(counts.total(), w);
        }
    }
}
