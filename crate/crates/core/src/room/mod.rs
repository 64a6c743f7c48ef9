//! Room, array, and scene description plus the protocol sampler that draws
//! randomized scenes.

mod render;
mod rir;
mod signals;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Position;

pub use render::{render_components, render_scene, RenderedScene};
pub use rir::{
    check_endpoints, default_max_order, image_source_rir, reflection_coefficient, schroeder_decay_time, simulate_rir,
};
pub use signals::{load_source_signals, read_manifest, synthetic_speech};

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

fn default_speed_of_sound() -> f64 {
    DEFAULT_SPEED_OF_SOUND
}

/// Shoebox room. `t60 == 0` means anechoic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub t60: f64,
    #[serde(default = "default_speed_of_sound")]
    pub speed_of_sound: f64,
}

impl RoomSpec {
    pub fn new(length: f64, width: f64, height: f64, t60: f64) -> Self {
        RoomSpec {
            length,
            width,
            height,
            t60,
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
        }
    }

    pub fn dims(&self) -> [f64; 3] {
        [self.length, self.width, self.height]
    }

    pub fn volume(&self) -> f64 {
        self.length * self.width * self.height
    }

    pub fn surface_area(&self) -> f64 {
        2.0 * (self.length * self.width + self.length * self.height + self.width * self.height)
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.dims().iter().all(|d| d.is_finite() && *d > 0.0);
        if !dims_ok {
            return Err(Error::Domain(format!("room dimensions must be positive: {:?}", self.dims())));
        }
        if !(self.t60 >= 0.0 && self.t60.is_finite()) {
            return Err(Error::Domain(format!("t60 must be >= 0, got {}", self.t60)));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::Domain("speed of sound must be positive".into()));
        }
        Ok(())
    }

    /// Strictly inside, i.e. not touching any wall.
    pub fn contains(&self, p: &Position) -> bool {
        self.wall_distance(p) > 0.0
    }

    /// Signed distance to the nearest wall (negative outside).
    pub fn wall_distance(&self, p: &Position) -> f64 {
        let d = self.dims();
        (0..3)
            .map(|i| p[i].min(d[i] - p[i]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Maps room coordinates into the unit cube.
    pub fn normalize(&self, p: &Position) -> [f64; 3] {
        let d = self.dims();
        [p[0] / d[0], p[1] / d[1], p[2] / d[2]]
    }

    pub fn denormalize(&self, u: [f64; 3]) -> Position {
        let d = self.dims();
        Position([u[0] * d[0], u[1] * d[1], u[2] * d[2]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicPair {
    pub mic1: Position,
    pub mic2: Position,
}

impl MicPair {
    pub fn spacing(&self) -> f64 {
        self.mic1.distance(&self.mic2)
    }

    pub fn center(&self) -> Position {
        (self.mic1 + self.mic2) * 0.5
    }
}

/// M microphone pairs. Channel `2m` is mic 1 of pair `m`, channel `2m + 1` is mic 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub pairs: Vec<MicPair>,
    pub intra_pair_distance: f64,
}

impl ArrayGeometry {
    pub const SPACING_TOLERANCE: f64 = 1e-9;

    pub fn new(pairs: Vec<MicPair>) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Config("array needs at least one microphone pair".into()))?;
        let geometry = ArrayGeometry {
            intra_pair_distance: first.spacing(),
            pairs,
        };
        geometry.check_spacing()?;
        Ok(geometry)
    }

    /// Builds the array from a flat list of positions in channel order.
    pub fn from_mic_positions(mics: &[Position]) -> Result<Self> {
        if mics.is_empty() || mics.len() % 2 != 0 {
            return Err(Error::Config(format!(
                "geometry needs an even, non-zero number of microphones, got {}",
                mics.len()
            )));
        }
        let pairs = mics
            .chunks_exact(2)
            .map(|c| MicPair { mic1: c[0], mic2: c[1] })
            .collect();
        Self::new(pairs)
    }

    /// Pairs spread uniformly along a rectangle inset from the walls, each pair
    /// lying along the wall it faces.
    pub fn perimeter(
        room: &RoomSpec,
        num_pairs: usize,
        spacing: f64,
        height: f64,
        wall_offset: f64,
    ) -> Result<Self> {
        if num_pairs == 0 {
            return Err(Error::Config("num_pairs must be >= 1".into()));
        }
        let (lx, ly) = (room.length - 2.0 * wall_offset, room.width - 2.0 * wall_offset);
        if lx <= 0.0 || ly <= 0.0 {
            return Err(Error::Config("array wall offset leaves no perimeter".into()));
        }
        let perimeter = 2.0 * (lx + ly);
        let step = perimeter / num_pairs as f64;
        let pairs = (0..num_pairs)
            .map(|i| {
                let s = (i as f64 + 0.5) * step;
                let (cx, cy, tx, ty) = if s < lx {
                    (s, 0.0, 1.0, 0.0)
                } else if s < lx + ly {
                    (lx, s - lx, 0.0, 1.0)
                } else if s < 2.0 * lx + ly {
                    (lx - (s - lx - ly), ly, -1.0, 0.0)
                } else {
                    (0.0, ly - (s - 2.0 * lx - ly), 0.0, -1.0)
                };
                let center = Position::new(cx + wall_offset, cy + wall_offset, height);
                let half = Position::new(tx, ty, 0.0) * (0.5 * spacing);
                MicPair {
                    mic1: center - half,
                    mic2: center + half,
                }
            })
            .collect();
        let geometry = ArrayGeometry {
            pairs,
            intra_pair_distance: spacing,
        };
        geometry.validate(room)?;
        Ok(geometry)
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn num_channels(&self) -> usize {
        2 * self.pairs.len()
    }

    pub fn mic(&self, channel: usize) -> Position {
        let pair = &self.pairs[channel / 2];
        if channel % 2 == 0 {
            pair.mic1
        } else {
            pair.mic2
        }
    }

    pub fn mic_positions(&self) -> Vec<Position> {
        (0..self.num_channels()).map(|c| self.mic(c)).collect()
    }

    fn check_spacing(&self) -> Result<()> {
        for (m, pair) in self.pairs.iter().enumerate() {
            if (pair.spacing() - self.intra_pair_distance).abs() > Self::SPACING_TOLERANCE {
                return Err(Error::Config(format!(
                    "pair {m} spacing {} differs from intra-pair distance {}",
                    pair.spacing(),
                    self.intra_pair_distance
                )));
            }
            if pair.spacing() == 0.0 {
                return Err(Error::Config(format!("pair {m} has coincident microphones")));
            }
        }
        Ok(())
    }

    pub fn validate(&self, room: &RoomSpec) -> Result<()> {
        self.check_spacing()?;
        for (c, mic) in self.mic_positions().iter().enumerate() {
            if !room.contains(mic) {
                return Err(Error::Config(format!("microphone {c} at {:?} is not inside the room", mic.0)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePlacement {
    pub position: Position,
    pub signal_id: String,
}

/// Ground truth for one rendered mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub room: RoomSpec,
    pub array: ArrayGeometry,
    pub sources: Vec<SourcePlacement>,
    pub overlap_fraction: f64,
    pub sir_db: f64,
    /// `None` renders without additive noise.
    pub snr_db: Option<f64>,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Scene {
    pub fn source_positions(&self) -> Vec<Position> {
        self.sources.iter().map(|s| s.position).collect()
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn validate(&self, wall_margin: f64) -> Result<()> {
        self.room.validate()?;
        self.array.validate(&self.room)?;
        if self.sources.is_empty() {
            return Err(Error::Config("scene needs at least one source".into()));
        }
        for (s, src) in self.sources.iter().enumerate() {
            if self.room.wall_distance(&src.position) < wall_margin {
                return Err(Error::Config(format!(
                    "source {s} at {:?} is closer than {wall_margin} m to a wall",
                    src.position.0
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config(format!("overlap fraction {} outside [0, 1]", self.overlap_fraction)));
        }
        Ok(())
    }
}

/// Where source signals come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSource {
    /// Speech-like harmonic syllables generated from the scene seed.
    Synthetic,
    /// Mono WAV files; one is drawn per source.
    Manifest { files: Vec<PathBuf> },
}

/// One cell of the evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub t60: f64,
    pub sir_db: f64,
    pub overlap: f64,
}

impl Condition {
    pub fn tag(&self) -> String {
        format!(
            "t60={:.2}/sir={}/overlap={}",
            self.t60,
            self.sir_db,
            (self.overlap * 100.0).round()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub num_speakers: usize,
    pub length_range: [f64; 2],
    pub width_range: [f64; 2],
    pub height_range: [f64; 2],
    pub t60_choices: Vec<f64>,
    pub overlap_choices: Vec<f64>,
    pub sir_choices: Vec<f64>,
    pub snr_db: Option<f64>,
    pub num_pairs: usize,
    pub intra_pair_distance: f64,
    pub array_height: f64,
    pub array_wall_offset: f64,
    /// Overrides the perimeter placement; microphone positions in channel order.
    pub geometry: Option<Vec<Position>>,
    pub source_height: f64,
    pub wall_margin: f64,
    pub mic_margin: f64,
    pub sample_rate: u32,
    pub speed_of_sound: f64,
    pub utterance_seconds: f64,
    pub signals: SignalSource,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            num_speakers: 2,
            length_range: [5.0, 7.0],
            width_range: [5.0, 7.0],
            height_range: [2.2, 2.6],
            t60_choices: vec![0.0, 0.2],
            overlap_choices: vec![0.25, 0.5, 0.75],
            sir_choices: vec![0.0, 5.0],
            snr_db: Some(30.0),
            num_pairs: 8,
            intra_pair_distance: 0.2,
            array_height: 1.5,
            array_wall_offset: 0.5,
            geometry: None,
            source_height: 1.5,
            wall_margin: 0.3,
            mic_margin: 0.5,
            sample_rate: 16_000,
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
            utterance_seconds: 1.0,
            signals: SignalSource::Synthetic,
        }
    }
}

impl ProtocolConfig {
    /// All (t60, SIR, overlap) cells in a fixed order.
    pub fn conditions(&self) -> Vec<Condition> {
        let mut cells = Vec::new();
        for &t60 in &self.t60_choices {
            for &sir_db in &self.sir_choices {
                for &overlap in &self.overlap_choices {
                    cells.push(Condition { t60, sir_db, overlap });
                }
            }
        }
        cells
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 {
            return Err(Error::Config("num_speakers must be >= 1".into()));
        }
        if self.t60_choices.is_empty() || self.overlap_choices.is_empty() || self.sir_choices.is_empty() {
            return Err(Error::Config("t60, overlap and SIR choices must be non-empty".into()));
        }
        if let SignalSource::Manifest { files } = &self.signals {
            if files.is_empty() {
                return Err(Error::Config("source-signal manifest is empty".into()));
            }
        }
        for r in [self.length_range, self.width_range, self.height_range] {
            if !(r[0] > 0.0 && r[1] >= r[0]) {
                return Err(Error::Config(format!("invalid room range {r:?}")));
            }
        }
        if !(self.utterance_seconds > 0.0) {
            return Err(Error::Config("utterance_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// Draws a scene with its condition picked uniformly from the protocol choices.
pub fn sample_scene(config: &ProtocolConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let condition = Condition {
        t60: config.t60_choices[rng.random_range(0..config.t60_choices.len())],
        sir_db: config.sir_choices[rng.random_range(0..config.sir_choices.len())],
        overlap: config.overlap_choices[rng.random_range(0..config.overlap_choices.len())],
    };
    sample_scene_in(config, &condition, seed)
}

/// Draws room, array placement and source positions for a fixed condition.
pub fn sample_scene_in(config: &ProtocolConfig, condition: &Condition, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
        if r[1] > r[0] {
            rng.random_range(r[0]..r[1])
        } else {
            r[0]
        }
    };
    let mut room = RoomSpec::new(
        uniform(&mut rng, config.length_range),
        uniform(&mut rng, config.width_range),
        uniform(&mut rng, config.height_range),
        condition.t60,
    );
    room.speed_of_sound = config.speed_of_sound;

    let array = match &config.geometry {
        Some(mics) => {
            let geometry = ArrayGeometry::from_mic_positions(mics)?;
            geometry.validate(&room)?;
            geometry
        }
        None => ArrayGeometry::perimeter(
            &room,
            config.num_pairs,
            config.intra_pair_distance,
            config.array_height,
            config.array_wall_offset,
        )?,
    };

    let mics = array.mic_positions();
    let mut sources = Vec::with_capacity(config.num_speakers);
    let margin = config.wall_margin;
    for _ in 0..config.num_speakers {
        let mut attempts = 0;
        let position = loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config(
                    "could not place a source away from walls and microphones".into(),
                ));
            }
            let p = Position::new(
                rng.random_range(margin..room.length - margin),
                rng.random_range(margin..room.width - margin),
                config.source_height,
            );
            if mics.iter().all(|m| m.distance(&p) >= config.mic_margin) {
                break p;
            }
        };
        let signal_id = match &config.signals {
            SignalSource::Synthetic => format!("synthetic:{}", rng.random::<u64>()),
            SignalSource::Manifest { files } => {
                files[rng.random_range(0..files.len())].display().to_string()
            }
        };
        sources.push(SourcePlacement { position, signal_id });
    }

    Ok(Scene {
        room,
        array,
        sources,
        overlap_fraction: condition.overlap,
        sir_db: condition.sir_db,
        snr_db: config.snr_db,
        sample_rate: config.sample_rate,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_protocol_ranges() {
        let config = ProtocolConfig::default();
        let scene = sample_scene(&config, 7).unwrap();
        assert!((5.0..=7.0).contains(&scene.room.length));
        assert!((5.0..=7.0).contains(&scene.room.width));
        assert!((2.2..=2.6).contains(&scene.room.height));
        assert_eq!(scene.num_sources(), 2);
        assert_eq!(scene.array.num_pairs(), 8);
        scene.validate(config.wall_margin).unwrap();
    }

    #[test]
    fn same_seed_same_scene() {
        let config = ProtocolConfig::default();
        assert_eq!(sample_scene(&config, 11).unwrap(), sample_scene(&config, 11).unwrap());
        assert_ne!(sample_scene(&config, 11).unwrap(), sample_scene(&config, 12).unwrap());
    }

    #[test]
    fn single_anechoic_source() {
        let config = ProtocolConfig {
            num_speakers: 1,
            t60_choices: vec![0.0],
            ..Default::default()
        };
        let scene = sample_scene(&config, 3).unwrap();
        assert_eq!(scene.num_sources(), 1);
        assert_eq!(scene.room.t60, 0.0);
    }

    #[test]
    fn empty_manifest_is_a_config_error() {
        let config = ProtocolConfig {
            signals: SignalSource::Manifest { files: vec![] },
            ..Default::default()
        };
        assert!(matches!(sample_scene(&config, 1), Err(Error::Config(_))));
    }

    #[test]
    fn perimeter_array_spacing_and_containment() {
        for (l, w) in [(5.0, 5.0), (7.0, 5.0), (5.3, 6.9)] {
            let room = RoomSpec::new(l, w, 2.4, 0.0);
            let array = ArrayGeometry::perimeter(&room, 8, 0.2, 1.5, 0.5).unwrap();
            for pair in &array.pairs {
                assert!((pair.spacing() - 0.2).abs() < 1e-9);
                assert!(room.contains(&pair.mic1) && room.contains(&pair.mic2));
            }
        }
    }

    #[test]
    fn sources_respect_margins() {
        let config = ProtocolConfig::default();
        for seed in 0..50 {
            let scene = sample_scene(&config, seed).unwrap();
            for src in &scene.sources {
                assert!(scene.room.wall_distance(&src.position) >= 0.3);
                for mic in scene.array.mic_positions() {
                    assert!(mic.distance(&src.position) >= 0.5);
                }
            }
        }
    }

    #[test]
    fn geometry_override_checks_spacing() {
        let mics = vec![
            Position::new(1.0, 1.0, 1.5),
            Position::new(1.2, 1.0, 1.5),
            Position::new(2.0, 1.0, 1.5),
            Position::new(2.3, 1.0, 1.5),
        ];
        assert!(ArrayGeometry::from_mic_positions(&mics).is_err());
        assert!(ArrayGeometry::from_mic_positions(&mics[..2]).is_ok());
        assert!(ArrayGeometry::from_mic_positions(&mics[..3]).is_err());
    }
}
