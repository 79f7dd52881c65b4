//! Discrete-echo model of a multi-span optical link and synthesis of the
//! received record for a given switch state.
//!
//! The link is an ordered chain of sections (fiber spans and node devices)
//! with a delimiting reflector at every boundary, so each section's delay is
//! defined between two known reference planes. A measurement station sits at
//! a node (or at the receive terminal) and couples the probe in through two
//! switched taps: switch 1 probes toward the upstream span, switch 2 probes
//! toward the downstream reflector, and both together route the probe through
//! the node for the transmissive measurement.
//!
//! Every optical path is reduced to an [`Echo`]: a true (clock-free) delay
//! and a linear amplitude factor. The receiver record is then the sum of
//! delayed, scaled copies of the probe waveform resampled on the receiver's
//! imperfect clock grid, plus white Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::SampledWaveform;

/// Default fiber propagation delay, seconds per meter.
pub const DEFAULT_UNIT_DELAY_S_PER_M: f64 = 5e-9;
/// Default fiber attenuation, dB per km.
pub const DEFAULT_ATTENUATION_DB_PER_KM: f64 = 0.2;
/// Default thermal coefficient of fiber delay, ppm per kelvin.
pub const DEFAULT_TEMP_COEFF_PPM_PER_K: f64 = 7.0;
/// Default probe reflectance of a delimiting reflector, dB.
pub const DEFAULT_REFLECTANCE_DB: f64 = -7.0;
/// Default probe insertion loss of a delimiting reflector, dB.
pub const DEFAULT_INSERTION_LOSS_DB: f64 = 1.0;

/// Optical power factor for a dB value.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// One fiber span between two delimiting reflectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberSpan {
    pub length_m: f64,
    /// Seconds of one-way delay per meter at the reference temperature.
    pub unit_delay_s_per_m: f64,
    pub attenuation_db_per_km: f64,
    pub temp_coeff_ppm_per_k: f64,
    /// Kelvin away from the reference temperature.
    pub temperature_offset_k: f64,
}

impl FiberSpan {
    pub fn with_length_m(length_m: f64) -> Self {
        Self {
            length_m,
            unit_delay_s_per_m: DEFAULT_UNIT_DELAY_S_PER_M,
            attenuation_db_per_km: DEFAULT_ATTENUATION_DB_PER_KM,
            temp_coeff_ppm_per_k: DEFAULT_TEMP_COEFF_PPM_PER_K,
            temperature_offset_k: 0.0,
        }
    }

    /// One-way propagation delay including the thermal stretch.
    pub fn one_way_delay(&self) -> f64 {
        self.length_m
            * self.unit_delay_s_per_m
            * (1.0 + self.temp_coeff_ppm_per_k * 1e-6 * self.temperature_offset_k)
    }

    pub fn round_trip_delay(&self) -> f64 {
        2.0 * self.one_way_delay()
    }

    pub fn one_way_loss_db(&self) -> f64 {
        self.attenuation_db_per_km * self.length_m / 1000.0
    }
}

/// An in-line device (e.g. an amplifier) whose internals the probe cannot
/// see; it contributes a single-pass delay and gain, and may be one-way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDevice {
    pub internal_delay_s: f64,
    pub gain_db: f64,
    /// True when an isolator blocks reverse transmission.
    pub unidirectional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Section {
    Fiber(FiberSpan),
    Node(NodeDevice),
}

impl Section {
    pub fn one_way_delay(&self) -> f64 {
        match self {
            Section::Fiber(f) => f.one_way_delay(),
            Section::Node(n) => n.internal_delay_s,
        }
    }

    pub fn is_node(&self) -> bool {
        matches!(self, Section::Node(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectorKind {
    /// Coupler/reflector combination; reflects exactly at its plane.
    Coupler,
    /// Thin-film filter backed by a strong reflector; reflection epochs
    /// carry the calibrated round-trip offset of the filter-to-reflector
    /// spacing.
    Tff,
}

/// A partial reflector marking a section boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelimitingReflector {
    pub kind: ReflectorKind,
    pub reflectance_db: f64,
    pub insertion_loss_db: f64,
    /// Round-trip offset added to every reflection epoch (tff only).
    pub calibration_offset_s: f64,
}

impl Default for DelimitingReflector {
    fn default() -> Self {
        Self {
            kind: ReflectorKind::Coupler,
            reflectance_db: DEFAULT_REFLECTANCE_DB,
            insertion_loss_db: DEFAULT_INSERTION_LOSS_DB,
            calibration_offset_s: 0.0,
        }
    }
}

impl DelimitingReflector {
    pub fn tff(calibration_offset_s: f64) -> Self {
        Self {
            kind: ReflectorKind::Tff,
            calibration_offset_s,
            ..Self::default()
        }
    }
}

/// An intermediate reflection event inside a span (e.g. a connector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorReflection {
    /// Index of the fiber section the connector sits in.
    pub section: usize,
    /// Meters from the section's upstream end.
    pub position_m: f64,
    pub reflectance_db: f64,
}

/// Where the measurement station couples into the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationSite {
    /// At the node with this section index; both switches are available.
    Node(usize),
    /// At the receive terminal after the last reflector; only switch 1.
    RxEnd,
}

/// The probe coupling hardware at the station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub site: StationSite,
    /// One-way lead-in delay from the instrument to the switch-1 tap.
    pub sw1_jumper_s: f64,
    /// One-way lead-in delay from the instrument to the switch-2 tap.
    pub sw2_jumper_s: f64,
    /// Loss per traversal of a tap coupler, dB.
    pub tap_loss_db: f64,
}

impl Station {
    pub fn at(site: StationSite) -> Self {
        Self {
            site,
            sw1_jumper_s: 10e-9,
            sw2_jumper_s: 10e-9,
            tap_loss_db: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchState {
    pub sw1: bool,
    pub sw2: bool,
}

impl SwitchState {
    pub const SW1_ONLY: SwitchState = SwitchState {
        sw1: true,
        sw2: false,
    };
    pub const SW2_ONLY: SwitchState = SwitchState {
        sw1: false,
        sw2: true,
    };
    pub const BOTH: SwitchState = SwitchState {
        sw1: true,
        sw2: true,
    };
}

/// The receiver time base. A true delay `d` appears on the receiver's lag
/// axis at `d / (1 + fractional_offset)`; per-sample timing jitter is
/// zero-mean Gaussian with the configured RMS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    /// Dimensionless fractional frequency error (100e-6 = 100 ppm).
    pub fractional_offset: f64,
    pub jitter_rms_s: f64,
    pub seed: u64,
}

impl ClockModel {
    pub fn ideal() -> Self {
        Self {
            fractional_offset: 0.0,
            jitter_rms_s: 0.0,
            seed: 0,
        }
    }

    pub fn with_offset(fractional_offset: f64) -> Self {
        Self {
            fractional_offset,
            ..Self::ideal()
        }
    }

    /// Receiver-axis position of a true delay.
    pub fn apparent_delay(&self, true_delay: f64) -> f64 {
        true_delay / (1.0 + self.fractional_offset)
    }

    /// True time at which the sample labeled `label_time` is actually taken.
    pub fn true_time_of(&self, label_time: f64) -> f64 {
        label_time * (1.0 + self.fractional_offset)
    }
}

/// One optical path from transmitter to receiver: true delay and linear
/// power-domain amplitude factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Echo {
    pub delay: f64,
    pub amplitude: f64,
}

/// Every discrete path for a switch state, sorted by increasing delay.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoList(Vec<Echo>);

impl EchoList {
    /// Build a list from arbitrary echoes; sorts by delay and checks that
    /// delays and amplitudes are positive.
    pub fn new(echoes: Vec<Echo>) -> Result<Self> {
        if echoes.is_empty() {
            return Err(Error::Topology("echo list is empty".into()));
        }
        for e in &echoes {
            if !(e.delay > 0.0) || !e.delay.is_finite() {
                return Err(Error::Topology(format!(
                    "echo delay {} must be positive and finite",
                    e.delay
                )));
            }
            if !(e.amplitude > 0.0) || !e.amplitude.is_finite() {
                return Err(Error::Topology(format!(
                    "echo amplitude {} must be positive and finite",
                    e.amplitude
                )));
            }
        }
        Ok(Self::from_unsorted(echoes))
    }

    fn from_unsorted(mut echoes: Vec<Echo>) -> Self {
        echoes.sort_by(|a, b| a.delay.partial_cmp(&b.delay).unwrap());
        debug_assert!(echoes.iter().all(|e| e.delay > 0.0 && e.amplitude > 0.0));
        EchoList(echoes)
    }

    pub fn echoes(&self) -> &[Echo] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_delay(&self) -> f64 {
        self.0.last().map(|e| e.delay).unwrap_or(0.0)
    }
}

/// The full measurement arrangement: link chain, boundary reflectors,
/// optional connector reflections, receiver noise, and the station with its
/// switched taps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkTopology {
    /// Section `i` is bounded by reflectors `i` and `i + 1`.
    pub sections: Vec<Section>,
    /// `sections.len() + 1` boundary reflectors.
    pub reflectors: Vec<DelimitingReflector>,
    pub connectors: Vec<ConnectorReflection>,
    /// Receiver noise, linear amplitude standard deviation.
    pub noise_rms: f64,
    pub station: Station,
}

impl LinkTopology {
    /// A chain of sections with default reflectors at every boundary and the
    /// station at the receive end.
    pub fn chain(sections: Vec<Section>) -> Self {
        let reflectors = vec![DelimitingReflector::default(); sections.len() + 1];
        Self {
            sections,
            reflectors,
            connectors: Vec::new(),
            noise_rms: 0.0,
            station: Station::at(StationSite::RxEnd),
        }
    }

    pub fn with_station(mut self, station: Station) -> Self {
        self.station = station;
        self
    }

    pub fn with_noise(mut self, noise_rms: f64) -> Self {
        self.noise_rms = noise_rms;
        self
    }

    /// Ground-truth one-way delay of the whole chain (sum of sections).
    pub fn total_one_way_true(&self) -> f64 {
        self.sections.iter().map(|s| s.one_way_delay()).sum()
    }

    /// The same chain traversed in the opposite direction.
    pub fn reversed(&self) -> Self {
        let mut sections = self.sections.clone();
        sections.reverse();
        let mut reflectors = self.reflectors.clone();
        reflectors.reverse();
        let connectors = self
            .connectors
            .iter()
            .map(|c| {
                let new_section = self.sections.len() - 1 - c.section;
                let length = match &self.sections[c.section] {
                    Section::Fiber(f) => f.length_m,
                    Section::Node(_) => 0.0,
                };
                ConnectorReflection {
                    section: new_section,
                    position_m: length - c.position_m,
                    reflectance_db: c.reflectance_db,
                }
            })
            .collect();
        Self {
            sections,
            reflectors,
            connectors,
            noise_rms: self.noise_rms,
            station: self.station.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sections.is_empty() {
            return Err(Error::Topology("link has no sections".into()));
        }
        if self.reflectors.len() != self.sections.len() + 1 {
            return Err(Error::Topology(format!(
                "{} sections need {} delimiting reflectors, found {}",
                self.sections.len(),
                self.sections.len() + 1,
                self.reflectors.len()
            )));
        }
        for (i, r) in self.reflectors.iter().enumerate() {
            if !(r.reflectance_db < 0.0) {
                return Err(Error::Topology(format!(
                    "reflector {i}: reflectance {} dB must be negative",
                    r.reflectance_db
                )));
            }
            if !(r.insertion_loss_db >= 0.0) {
                return Err(Error::Topology(format!(
                    "reflector {i}: insertion loss {} dB must be non-negative",
                    r.insertion_loss_db
                )));
            }
            match r.kind {
                ReflectorKind::Coupler if r.calibration_offset_s != 0.0 => {
                    return Err(Error::Topology(format!(
                        "reflector {i}: coupler reflectors have no calibration offset"
                    )));
                }
                ReflectorKind::Tff if r.calibration_offset_s < 0.0 => {
                    return Err(Error::Topology(format!(
                        "reflector {i}: calibration offset must be non-negative"
                    )));
                }
                _ => {}
            }
        }
        for (i, s) in self.sections.iter().enumerate() {
            match s {
                Section::Fiber(f) => {
                    if !(f.length_m >= 0.0) {
                        return Err(Error::Topology(format!(
                            "section {i}: fiber length {} m must be non-negative",
                            f.length_m
                        )));
                    }
                    if !(f.unit_delay_s_per_m > 0.0) {
                        return Err(Error::Topology(format!(
                            "section {i}: unit delay must be positive"
                        )));
                    }
                    if !(f.attenuation_db_per_km >= 0.0) {
                        return Err(Error::Topology(format!(
                            "section {i}: attenuation must be non-negative"
                        )));
                    }
                }
                Section::Node(n) => {
                    if !(n.internal_delay_s >= 0.0) {
                        return Err(Error::Topology(format!(
                            "section {i}: node delay must be non-negative"
                        )));
                    }
                }
            }
        }
        for (i, c) in self.connectors.iter().enumerate() {
            let span = match self.sections.get(c.section) {
                Some(Section::Fiber(f)) => f,
                _ => {
                    return Err(Error::Topology(format!(
                        "connector {i}: section {} is not a fiber span",
                        c.section
                    )));
                }
            };
            if !(c.position_m >= 0.0 && c.position_m <= span.length_m) {
                return Err(Error::Topology(format!(
                    "connector {i}: position {} m outside span of {} m",
                    c.position_m, span.length_m
                )));
            }
            if !(c.reflectance_db < 0.0) {
                return Err(Error::Topology(format!(
                    "connector {i}: reflectance must be negative"
                )));
            }
        }
        if !(self.noise_rms >= 0.0) {
            return Err(Error::Topology("noise_rms must be non-negative".into()));
        }
        match self.station.site {
            StationSite::Node(i) => {
                if i >= self.sections.len() || !self.sections[i].is_node() {
                    return Err(Error::Topology(format!(
                        "station site: section {i} is not a node"
                    )));
                }
            }
            StationSite::RxEnd => {}
        }
        if !(self.station.sw1_jumper_s > 0.0) || !(self.station.sw2_jumper_s > 0.0) {
            return Err(Error::Topology(
                "station jumpers must be positive (there is always a physical lead-in)".into(),
            ));
        }
        Ok(())
    }
}

/// Enumerate every discrete transmitter-to-receiver path for a switch state.
///
/// Reflective paths carry one reflection each; a probe cannot cross a
/// unidirectional device in both directions, so the walk stops there. With
/// both switches on, the single transmissive path through the station's node
/// is added: the probe enters through switch 1, turns around at the upstream
/// reflector, crosses the node forward, and exits through switch 2.
///
/// Delays are true (clock-free) times and include the tff calibration
/// offsets on every reflection epoch.
pub fn enumerate_echoes(link: &LinkTopology, switch_state: SwitchState) -> Result<EchoList> {
    link.validate()?;
    let station = &link.station;
    let mut echoes = Vec::new();

    if !switch_state.sw1 && !switch_state.sw2 {
        return Err(Error::NoPath(
            "both switches open: no probe reaches the link".into(),
        ));
    }

    // Reflector index immediately upstream of the station.
    let upstream_reflector = match station.site {
        StationSite::Node(i) => i,
        StationSite::RxEnd => link.sections.len(),
    };

    if switch_state.sw1 {
        walk_reflective(
            link,
            upstream_reflector,
            Direction::Upstream,
            station.sw1_jumper_s,
            2.0 * station.tap_loss_db,
            &mut echoes,
        );
    }

    if switch_state.sw2 {
        let node_index = match station.site {
            StationSite::Node(i) => i,
            StationSite::RxEnd => {
                return Err(Error::NoPath(
                    "switch 2 has no downstream port at the receive terminal".into(),
                ));
            }
        };
        walk_reflective(
            link,
            node_index + 1,
            Direction::Downstream,
            station.sw2_jumper_s,
            2.0 * station.tap_loss_db,
            &mut echoes,
        );
    }

    if switch_state.sw1 && switch_state.sw2 {
        // Transmissive path. Station placement was validated above.
        let node_index = match station.site {
            StationSite::Node(i) => i,
            StationSite::RxEnd => unreachable!("checked by the switch-2 branch"),
        };
        let node = match &link.sections[node_index] {
            Section::Node(n) => n,
            Section::Fiber(_) => unreachable!("validated station site"),
        };
        let entry = &link.reflectors[node_index];
        let delay = station.sw1_jumper_s
            + entry.calibration_offset_s
            + node.internal_delay_s
            + station.sw2_jumper_s;
        let amp_db = entry.reflectance_db + node.gain_db - 2.0 * station.tap_loss_db;
        echoes.push(Echo {
            delay,
            amplitude: db_to_linear(amp_db),
        });
    }

    if echoes.is_empty() {
        return Err(Error::NoPath(
            "switch state yields no echo at the receiver".into(),
        ));
    }
    Ok(EchoList::from_unsorted(echoes))
}

enum Direction {
    /// Toward lower section indices (against the link direction).
    Upstream,
    /// Toward higher section indices (with the link direction).
    Downstream,
}

/// Walk outward from the tap, collecting one first-order reflection per
/// reflector and connector until the link ends or a unidirectional device
/// blocks the return path.
fn walk_reflective(
    link: &LinkTopology,
    first_reflector: usize,
    direction: Direction,
    jumper_s: f64,
    fixed_loss_db: f64,
    echoes: &mut Vec<Echo>,
) {
    let mut t = jumper_s; // one-way delay accumulated so far
    let mut loss_db = fixed_loss_db; // round-trip loss, reflectance excluded
    let mut r = first_reflector as isize;

    loop {
        let reflector = &link.reflectors[r as usize];
        echoes.push(Echo {
            delay: 2.0 * t + reflector.calibration_offset_s,
            amplitude: db_to_linear(reflector.reflectance_db - loss_db),
        });

        // Section beyond this reflector, in the walk direction.
        let next_section = match direction {
            Direction::Upstream => r - 1,
            Direction::Downstream => r,
        };
        if next_section < 0 || next_section as usize >= link.sections.len() {
            break;
        }
        let section_idx = next_section as usize;

        // Pass through the reflector, both ways.
        loss_db += 2.0 * reflector.insertion_loss_db;

        match &link.sections[section_idx] {
            Section::Node(node) => {
                if node.unidirectional {
                    // One leg of any round trip would run against the
                    // isolator; nothing beyond this device reflects back.
                    break;
                }
                t += node.internal_delay_s;
                loss_db -= 2.0 * node.gain_db;
            }
            Section::Fiber(span) => {
                let per_m_delay = if span.length_m > 0.0 {
                    span.one_way_delay() / span.length_m
                } else {
                    0.0
                };
                let per_m_loss = span.attenuation_db_per_km / 1000.0;
                for c in link.connectors.iter().filter(|c| c.section == section_idx) {
                    let dist_m = match direction {
                        Direction::Upstream => span.length_m - c.position_m,
                        Direction::Downstream => c.position_m,
                    };
                    echoes.push(Echo {
                        delay: 2.0 * (t + dist_m * per_m_delay),
                        amplitude: db_to_linear(
                            c.reflectance_db - loss_db - 2.0 * dist_m * per_m_loss,
                        ),
                    });
                }
                t += span.one_way_delay();
                loss_db += 2.0 * span.one_way_loss_db();
            }
        }

        r = match direction {
            Direction::Upstream => r - 1,
            Direction::Downstream => r + 1,
        };
    }
}

/// Guard around each echo's extent when checking acquisition windows: the
/// correlation main lobe spans about a bit duration either side of the peak.
fn window_guard(probe: &SampledWaveform) -> f64 {
    4.0 * probe.sample_period()
}

/// Synthesize the received record on the receiver clock grid.
///
/// Each echo contributes a delayed, scaled copy of the probe waveform; the
/// receiver samples at its own (offset, jittery) clock, so a true delay `d`
/// lands at apparent delay `d / (1 + fractional_offset)`. Values between
/// probe samples come from linear interpolation. White Gaussian noise of
/// level `noise_rms` is added over the whole window, seeded by `noise_seed`.
///
/// `window` is `(t_start, t_end)` in receiver-label seconds; when omitted
/// the record covers every echo. A window must contain or exclude each
/// echo's burst (with a main-lobe guard) in full — a window that cuts
/// through one is rejected, because the clipped correlation peak would fit
/// to a silently wrong center.
pub fn synthesize_received(
    echoes: &EchoList,
    probe_waveform: &SampledWaveform,
    clock: &ClockModel,
    noise_rms: f64,
    noise_seed: u64,
    window: Option<(f64, f64)>,
) -> Result<SampledWaveform> {
    let period = probe_waveform.sample_period();
    let burst = probe_waveform.duration();
    let guard = window_guard(probe_waveform);

    let (t_start, t_end) = match window {
        Some((a, b)) => {
            if !(b > a) {
                return Err(Error::WindowClip(format!(
                    "window [{a}, {b}] is empty or reversed"
                )));
            }
            (a, b)
        }
        None => {
            let first = clock.apparent_delay(echoes.echoes()[0].delay);
            let last = clock.apparent_delay(echoes.max_delay());
            (first - guard - period, last + burst + guard + period)
        }
    };

    // Every echo is either fully inside the window (guard included) or
    // entirely outside it.
    for e in echoes.echoes() {
        let d = clock.apparent_delay(e.delay);
        let lo = d - guard;
        let hi = d + burst + guard;
        let overlaps = hi > t_start && lo < t_end;
        let contained = lo >= t_start && hi <= t_end;
        if overlaps && !contained {
            return Err(Error::WindowClip(format!(
                "window [{t_start:.9e}, {t_end:.9e}] clips the echo at apparent delay {d:.9e}"
            )));
        }
    }

    let n = ((t_end - t_start) / period).round() as usize;
    if n == 0 {
        return Err(Error::WindowClip("window shorter than one sample".into()));
    }
    let mut samples = vec![0.0f64; n];

    let jitter = clock.jitter_rms_s;
    let stretch = 1.0 + clock.fractional_offset;

    for e in echoes.echoes() {
        let d_app = clock.apparent_delay(e.delay);
        // Receiver samples that can see this burst.
        let pad = 2.0 * period + 6.0 * jitter;
        let i_lo = (((d_app - pad) - t_start) / period).floor().max(0.0) as usize;
        let i_hi = ((((d_app + burst + pad) - t_start) / period).ceil() as usize).min(n);
        for i in i_lo..i_hi {
            let label = t_start + (i as f64 + 0.5) * period;
            let mut t_true = label * stretch;
            if jitter > 0.0 {
                t_true += jitter * gaussian_jitter(clock.seed, t_start, i);
            }
            samples[i] += e.amplitude * probe_waveform.value_at(t_true - e.delay);
        }
    }

    if noise_rms > 0.0 {
        let mut rng = ChaCha12Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, noise_rms).expect("valid noise level");
        for s in samples.iter_mut() {
            *s += normal.sample(&mut rng);
        }
    }

    Ok(SampledWaveform {
        samples,
        sample_rate: probe_waveform.sample_rate,
        start_time: t_start,
    })
}

/// Deterministic per-sample unit-variance jitter, keyed on the clock seed,
/// the window origin, and the sample index.
fn gaussian_jitter(seed: u64, window_start: f64, index: usize) -> f64 {
    let mut h = seed ^ window_start.to_bits() ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // SplitMix64.
    let mut next = || {
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let u1 = ((next() >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
    let u2 = (next() >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlator::{cross_correlate, detect_peaks, CorrelationMethod};
    use crate::signal::{generate_probe, shape_waveform};

    fn simple_span_link(length_m: f64) -> LinkTopology {
        LinkTopology::chain(vec![Section::Fiber(FiberSpan::with_length_m(length_m))])
    }

    fn three_section_link() -> LinkTopology {
        LinkTopology::chain(vec![
            Section::Fiber(FiberSpan::with_length_m(2000.0)),
            Section::Node(NodeDevice {
                internal_delay_s: 50e-9,
                gain_db: 17.0,
                unidirectional: true,
            }),
            Section::Fiber(FiberSpan::with_length_m(3000.0)),
        ])
        .with_station(Station::at(StationSite::Node(1)))
    }

    #[test]
    fn span_delay_follows_length_and_temperature() {
        let mut span = FiberSpan::with_length_m(100_000.0);
        assert!((span.one_way_delay() - 500e-6).abs() < 1e-18);
        assert_eq!(span.round_trip_delay(), 2.0 * span.one_way_delay());
        let base = span.one_way_delay();
        span.temperature_offset_k = 10.0;
        let ratio = span.one_way_delay() / base;
        assert!(
            (ratio - (1.0 + 7e-6 * 10.0)).abs() < 1e-15,
            "thermal scaling ratio {ratio}"
        );
    }

    #[test]
    fn ten_km_span_two_echoes_100us_apart() {
        let link = simple_span_link(10_000.0);
        let echoes = enumerate_echoes(&link, SwitchState::SW1_ONLY).unwrap();
        assert_eq!(echoes.len(), 2);
        let d = echoes.echoes()[1].delay - echoes.echoes()[0].delay;
        assert!((d - 100e-6).abs() < 1e-15, "delay difference {d}");
    }

    #[test]
    fn zero_length_span_echoes_coincide_up_to_calibration() {
        let mut link = simple_span_link(0.0);
        link.reflectors[0] = DelimitingReflector::tff(2e-9);
        let echoes = enumerate_echoes(&link, SwitchState::SW1_ONLY).unwrap();
        assert_eq!(echoes.len(), 2);
        let d = echoes.echoes()[1].delay - echoes.echoes()[0].delay;
        assert!((d - 2e-9).abs() < 1e-15);
    }

    #[test]
    fn three_section_both_switches_has_one_transmissive_path() {
        let link = three_section_link();
        let echoes = enumerate_echoes(&link, SwitchState::BOTH).unwrap();
        // By hand: sw1 sees reflectors 1 and 0 (2 echoes), sw2 sees
        // reflectors 2 and 3 (2 echoes), plus one transmissive path.
        assert_eq!(echoes.len(), 5);
        let station = &link.station;
        let expected_t = station.sw1_jumper_s + 50e-9 + station.sw2_jumper_s;
        let hits: Vec<&Echo> = echoes
            .echoes()
            .iter()
            .filter(|e| (e.delay - expected_t).abs() < 1e-15)
            .collect();
        assert_eq!(hits.len(), 1, "exactly one transmissive echo");
    }

    #[test]
    fn isolator_blocks_reflections_from_beyond_the_node() {
        let link = three_section_link();
        // sw2 probes downstream: reflector 2 (near) and reflector 3 (far end
        // of the downstream span); nothing from upstream of the node.
        let echoes = enumerate_echoes(&link, SwitchState::SW2_ONLY).unwrap();
        assert_eq!(echoes.len(), 2);
        // sw1 probes upstream: reflectors 1 and 0 only.
        let echoes = enumerate_echoes(&link, SwitchState::SW1_ONLY).unwrap();
        assert_eq!(echoes.len(), 2);

        // A second link upstream of the node would be visible if the device
        // were bidirectional.
        let mut bidi = LinkTopology::chain(vec![
            Section::Fiber(FiberSpan::with_length_m(1000.0)),
            Section::Node(NodeDevice {
                internal_delay_s: 10e-9,
                gain_db: 0.0,
                unidirectional: false,
            }),
            Section::Fiber(FiberSpan::with_length_m(1000.0)),
        ]);
        bidi.station = Station::at(StationSite::RxEnd);
        let echoes = enumerate_echoes(&bidi, SwitchState::SW1_ONLY).unwrap();
        assert_eq!(echoes.len(), 4, "bidirectional node passes the probe");
        let mut uni = bidi.clone();
        uni.sections[1] = Section::Node(NodeDevice {
            internal_delay_s: 10e-9,
            gain_db: 0.0,
            unidirectional: true,
        });
        let echoes = enumerate_echoes(&uni, SwitchState::SW1_ONLY).unwrap();
        assert_eq!(echoes.len(), 2, "isolator hides the upstream reflectors");
    }

    #[test]
    fn no_path_switch_states_are_rejected() {
        let link = simple_span_link(1000.0);
        assert!(matches!(
            enumerate_echoes(
                &link,
                SwitchState {
                    sw1: false,
                    sw2: false
                }
            ),
            Err(Error::NoPath(_))
        ));
        // Station at the receive terminal has no switch-2 port.
        assert!(matches!(
            enumerate_echoes(&link, SwitchState::SW2_ONLY),
            Err(Error::NoPath(_))
        ));
        assert!(matches!(
            enumerate_echoes(&link, SwitchState::BOTH),
            Err(Error::NoPath(_))
        ));
    }

    #[test]
    fn connector_reflections_appear_between_boundary_echoes() {
        let mut link = simple_span_link(10_000.0);
        link.connectors.push(ConnectorReflection {
            section: 0,
            position_m: 4000.0,
            reflectance_db: -40.0,
        });
        let echoes = enumerate_echoes(&link, SwitchState::SW1_ONLY).unwrap();
        assert_eq!(echoes.len(), 3);
        let mid = echoes.echoes()[1];
        // Station probes from the downstream end: 6000 m to the connector.
        let expected = 2.0 * (link.station.sw1_jumper_s + 6000.0 * 5e-9);
        assert!((mid.delay - expected).abs() < 1e-15);
        assert!(mid.amplitude < echoes.echoes()[0].amplitude);
    }

    #[test]
    fn reversed_chain_keeps_total_delay() {
        let link = three_section_link();
        let fwd = link.total_one_way_true();
        let rev = link.reversed().total_one_way_true();
        assert!((fwd - rev).abs() < 1e-18);
    }

    #[test]
    fn single_noiseless_echo_is_a_shifted_probe() {
        let probe = generate_probe(1, 256, 10e9).unwrap();
        let wave = shape_waveform(&probe, 4, 0.3).unwrap();
        let echoes = EchoList::from_unsorted(vec![Echo {
            delay: 1e-6,
            amplitude: 1.0,
        }]);
        let clock = ClockModel::ideal();
        let rx = synthesize_received(&echoes, &wave, &clock, 0.0, 0, None).unwrap();
        // Compare against the probe shifted to 1 us on the same grid.
        let mut worst = 0.0f64;
        for (i, &v) in rx.samples.iter().enumerate() {
            let t = rx.start_time + (i as f64 + 0.5) * rx.sample_period();
            let expected = wave.value_at(t - 1e-6);
            worst = worst.max((v - expected).abs());
        }
        assert!(worst < 1e-12, "worst deviation {worst}");
    }

    #[test]
    fn clock_offset_shifts_apparent_delay() {
        let clock = ClockModel::with_offset(100e-6);
        let apparent = clock.apparent_delay(500e-6);
        assert!(
            (apparent - 499.95001e-6).abs() < 1e-11,
            "apparent {apparent}"
        );
        // The exact model identity, up to f64 rounding.
        assert!((apparent * (1.0 + 100e-6) - 500e-6).abs() < 1e-18);

        // And the synthesized record places the burst there.
        let probe = generate_probe(2, 256, 10e9).unwrap();
        let wave = shape_waveform(&probe, 4, 0.3).unwrap();
        let echoes = EchoList::from_unsorted(vec![Echo {
            delay: 500e-6,
            amplitude: 1.0,
        }]);
        let rx = synthesize_received(
            &echoes,
            &wave,
            &clock,
            0.0,
            0,
            Some((apparent - 0.2e-6, apparent + wave.duration() + 0.2e-6)),
        )
        .unwrap();
        let trace = cross_correlate(&rx, &wave, CorrelationMethod::Fft).unwrap();
        let peaks = detect_peaks(&trace, 8.0, wave.samples.len() + 32);
        assert_eq!(peaks.len(), 1);
        let lag = trace.lag_at(peaks[0].index);
        assert!(
            (lag - apparent).abs() <= trace.lag_step(),
            "peak lag {lag} vs apparent {apparent}"
        );
    }

    #[test]
    fn windows_that_clip_a_burst_are_rejected() {
        let probe = generate_probe(3, 256, 10e9).unwrap();
        let wave = shape_waveform(&probe, 4, 0.3).unwrap();
        let echoes = EchoList::from_unsorted(vec![Echo {
            delay: 1e-6,
            amplitude: 1.0,
        }]);
        let clock = ClockModel::ideal();
        // Window ends mid-burst.
        let r = synthesize_received(
            &echoes,
            &wave,
            &clock,
            0.0,
            0,
            Some((0.9e-6, 1e-6 + 0.5 * wave.duration())),
        );
        assert!(matches!(r, Err(Error::WindowClip(_))));
        // Window that excludes the echo entirely is fine.
        let r = synthesize_received(&echoes, &wave, &clock, 0.0, 0, Some((3e-6, 4e-6)));
        assert!(r.is_ok());
        assert!(r.unwrap().samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesis_is_deterministic_in_seeds() {
        let probe = generate_probe(4, 256, 10e9).unwrap();
        let wave = shape_waveform(&probe, 4, 0.3).unwrap();
        let echoes = EchoList::from_unsorted(vec![Echo {
            delay: 2e-6,
            amplitude: 0.5,
        }]);
        let clock = ClockModel {
            fractional_offset: 20e-9,
            jitter_rms_s: 1e-12,
            seed: 11,
        };
        let a = synthesize_received(&echoes, &wave, &clock, 0.01, 42, None).unwrap();
        let b = synthesize_received(&echoes, &wave, &clock, 0.01, 42, None).unwrap();
        assert_eq!(a, b);
        let c = synthesize_received(&echoes, &wave, &clock, 0.01, 43, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn correlation_peak_heights_follow_echo_amplitudes() {
        let probe = generate_probe(5, 512, 10e9).unwrap();
        let wave = shape_waveform(&probe, 4, 0.3).unwrap();
        let echoes = EchoList::from_unsorted(vec![
            Echo {
                delay: 1e-6,
                amplitude: 1.0,
            },
            Echo {
                delay: 6e-6,
                amplitude: 0.5,
            },
        ]);
        let clock = ClockModel::ideal();
        let rx = synthesize_received(&echoes, &wave, &clock, 0.0, 0, None).unwrap();
        let trace = cross_correlate(&rx, &wave, CorrelationMethod::Fft).unwrap();
        let peaks = detect_peaks(&trace, 8.0, wave.samples.len() + 32);
        assert_eq!(peaks.len(), 2);
        let ratio = peaks[0].value / peaks[1].value;
        assert!(
            (ratio - 2.0).abs() < 0.1,
            "peak height ratio {ratio}, expected 2:1 within 5%"
        );
    }

    #[test]
    fn topology_validation_catches_bad_configs() {
        let mut link = simple_span_link(-5.0);
        assert!(matches!(link.validate(), Err(Error::Topology(_))));
        link = simple_span_link(100.0);
        link.reflectors.pop();
        assert!(link.validate().is_err());
        link = simple_span_link(100.0);
        link.reflectors[0].reflectance_db = 0.5;
        assert!(link.validate().is_err());
        link = simple_span_link(100.0);
        link.reflectors[0].calibration_offset_s = 1e-9; // coupler
        assert!(link.validate().is_err());
        link = simple_span_link(100.0);
        link.station.sw1_jumper_s = 0.0;
        assert!(link.validate().is_err());
    }
}
