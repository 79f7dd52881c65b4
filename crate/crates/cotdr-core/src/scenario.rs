//! Declarative measurement scenarios.
//!
//! A scenario is a TOML file naming the campaign type, the probe, the
//! receiver clock, the link under test, and output options. Key names carry
//! their units (`length_m`, `bit_rate_hz`, `offset_ppb`, ...) because unit
//! slips are the dominant failure mode in this domain. Loading resolves
//! every default, so a loaded scenario has no hidden values and serializes
//! back to an equivalent file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::budget;
use crate::error::{Error, Result};
use crate::link::{
    ClockModel, ConnectorReflection, DelimitingReflector, FiberSpan, LinkTopology, NodeDevice,
    ReflectorKind, Section, Station, StationSite,
};
use crate::protocol::{
    measure_asymmetry, AcquisitionConfig, BudgetAssumptions, MeasurementReport, Measurer,
    TraceDump,
};
use crate::signal::{generate_probe, ProbeSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignKind {
    /// Measure the span upstream of the station.
    Span,
    /// Measure one node's single-pass delay.
    Node,
    /// Measure every section and compose the link totals.
    Link,
    /// Measure both directions of a pair with a shared clock.
    Asymmetry,
    /// Closed-form error budget only; no simulation.
    Budget,
}

impl CampaignKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CampaignKind::Span => "span",
            CampaignKind::Node => "node",
            CampaignKind::Link => "link",
            CampaignKind::Asymmetry => "asymmetry",
            CampaignKind::Budget => "budget",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeCfg {
    pub seed: u64,
    pub length_bits: usize,
    pub bit_rate_hz: f64,
    pub oversampling: u32,
    pub rolloff: f64,
}

impl Default for ProbeCfg {
    fn default() -> Self {
        Self {
            seed: 1,
            length_bits: 1024,
            bit_rate_hz: 10e9,
            oversampling: 4,
            rolloff: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockCfg {
    pub offset_ppb: f64,
    pub jitter_rms_ps: f64,
    pub seed: u64,
}

impl Default for ClockCfg {
    fn default() -> Self {
        Self {
            offset_ppb: 0.0,
            jitter_rms_ps: 0.0,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationCfg {
    /// Section index of the node hosting the station; omitted means the
    /// receive terminal.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_index: Option<usize>,
    pub sw1_jumper_ns: f64,
    pub sw2_jumper_ns: f64,
    pub tap_loss_db: f64,
}

impl Default for StationCfg {
    fn default() -> Self {
        Self {
            node_index: None,
            sw1_jumper_ns: 10.0,
            sw2_jumper_ns: 10.0,
            tap_loss_db: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SectionCfg {
    Fiber {
        length_m: f64,
        unit_delay_ns_per_m: f64,
        attenuation_db_per_km: f64,
        temp_coeff_ppm_per_k: f64,
        temperature_offset_k: f64,
    },
    Node {
        internal_delay_ns: f64,
        gain_db: f64,
        unidirectional: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectorCfg {
    pub kind: ReflectorKind,
    pub reflectance_db: f64,
    pub insertion_loss_db: f64,
    pub calibration_offset_ps: f64,
}

impl Default for ReflectorCfg {
    fn default() -> Self {
        Self {
            kind: ReflectorKind::Coupler,
            reflectance_db: crate::link::DEFAULT_REFLECTANCE_DB,
            insertion_loss_db: crate::link::DEFAULT_INSERTION_LOSS_DB,
            calibration_offset_ps: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectorCfg {
    pub section: usize,
    pub position_m: f64,
    pub reflectance_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkCfg {
    /// Receiver noise, linear amplitude standard deviation.
    pub noise_rms: f64,
    pub sections: Vec<SectionCfg>,
    pub reflectors: Vec<ReflectorCfg>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub connectors: Vec<ConnectorCfg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionCfg {
    pub coarse_oversampling: u32,
    pub threshold_factor: f64,
    pub fit_halfwidth_bits: f64,
    pub gate_margin_bits: f64,
    pub max_node_delay_us: f64,
}

impl Default for AcquisitionCfg {
    fn default() -> Self {
        let d = AcquisitionConfig::default();
        Self {
            coarse_oversampling: d.coarse_oversampling,
            threshold_factor: d.threshold_factor,
            fit_halfwidth_bits: d.fit_halfwidth_bits,
            gate_margin_bits: d.gate_margin_bits,
            max_node_delay_us: d.max_node_delay_s * 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetCfg {
    /// Temperature excursion assumed for the thermal term.
    pub delta_t_k: f64,
    pub temp_coeff_ppm_per_k: f64,
    /// Nominal fit tolerance used in closed-form bounds.
    pub fit_tol_ps: f64,
}

impl Default for BudgetCfg {
    fn default() -> Self {
        Self {
            delta_t_k: 0.0,
            temp_coeff_ppm_per_k: crate::link::DEFAULT_TEMP_COEFF_PPM_PER_K,
            fit_tol_ps: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputCfg {
    #[serde(default)]
    pub emit_traces: bool,
}

/// A fully resolved scenario: every default is materialized.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub campaign: CampaignKind,
    /// Master seed for the noise and jitter streams.
    pub seed: u64,
    pub probe: ProbeCfg,
    pub clock: ClockCfg,
    pub station: StationCfg,
    pub link: LinkCfg,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub link_reverse: Option<LinkCfg>,
    pub acquisition: AcquisitionCfg,
    pub budget: BudgetCfg,
    pub output: OutputCfg,
}

// ---------------------------------------------------------------------
// Parsing with defaults
// ---------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    campaign: CampaignKind,
    seed: Option<u64>,
    probe: Option<RawProbe>,
    clock: Option<RawClock>,
    station: Option<RawStation>,
    link: RawLink,
    link_reverse: Option<RawLink>,
    acquisition: Option<RawAcquisition>,
    budget: Option<RawBudget>,
    output: Option<OutputCfg>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProbe {
    seed: Option<u64>,
    length_bits: Option<usize>,
    bit_rate_hz: Option<f64>,
    oversampling: Option<u32>,
    rolloff: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClock {
    offset_ppb: Option<f64>,
    jitter_rms_ps: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStation {
    node_index: Option<usize>,
    sw1_jumper_ns: Option<f64>,
    sw2_jumper_ns: Option<f64>,
    tap_loss_db: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    noise_rms: Option<f64>,
    sections: Vec<RawSection>,
    reflectors: Option<Vec<RawReflector>>,
    connectors: Option<Vec<ConnectorCfg>>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawSection {
    Fiber {
        length_m: f64,
        unit_delay_ns_per_m: Option<f64>,
        attenuation_db_per_km: Option<f64>,
        temp_coeff_ppm_per_k: Option<f64>,
        temperature_offset_k: Option<f64>,
    },
    Node {
        internal_delay_ns: f64,
        gain_db: Option<f64>,
        unidirectional: Option<bool>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReflector {
    kind: Option<ReflectorKind>,
    reflectance_db: Option<f64>,
    insertion_loss_db: Option<f64>,
    calibration_offset_ps: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAcquisition {
    coarse_oversampling: Option<u32>,
    threshold_factor: Option<f64>,
    fit_halfwidth_bits: Option<f64>,
    gate_margin_bits: Option<f64>,
    max_node_delay_us: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBudget {
    delta_t_k: Option<f64>,
    temp_coeff_ppm_per_k: Option<f64>,
    fit_tol_ps: Option<f64>,
}

fn resolve_link(raw: RawLink) -> LinkCfg {
    let sections: Vec<SectionCfg> = raw
        .sections
        .into_iter()
        .map(|s| match s {
            RawSection::Fiber {
                length_m,
                unit_delay_ns_per_m,
                attenuation_db_per_km,
                temp_coeff_ppm_per_k,
                temperature_offset_k,
            } => SectionCfg::Fiber {
                length_m,
                unit_delay_ns_per_m: unit_delay_ns_per_m
                    .unwrap_or(crate::link::DEFAULT_UNIT_DELAY_S_PER_M * 1e9),
                attenuation_db_per_km: attenuation_db_per_km
                    .unwrap_or(crate::link::DEFAULT_ATTENUATION_DB_PER_KM),
                temp_coeff_ppm_per_k: temp_coeff_ppm_per_k
                    .unwrap_or(crate::link::DEFAULT_TEMP_COEFF_PPM_PER_K),
                temperature_offset_k: temperature_offset_k.unwrap_or(0.0),
            },
            RawSection::Node {
                internal_delay_ns,
                gain_db,
                unidirectional,
            } => SectionCfg::Node {
                internal_delay_ns,
                gain_db: gain_db.unwrap_or(0.0),
                unidirectional: unidirectional.unwrap_or(true),
            },
        })
        .collect();

    let n_reflectors = sections.len() + 1;
    let reflectors = match raw.reflectors {
        None => vec![ReflectorCfg::default(); n_reflectors],
        Some(raws) => raws
            .into_iter()
            .map(|r| {
                let d = ReflectorCfg::default();
                ReflectorCfg {
                    kind: r.kind.unwrap_or(d.kind),
                    reflectance_db: r.reflectance_db.unwrap_or(d.reflectance_db),
                    insertion_loss_db: r.insertion_loss_db.unwrap_or(d.insertion_loss_db),
                    calibration_offset_ps: r.calibration_offset_ps.unwrap_or(0.0),
                }
            })
            .collect(),
    };

    LinkCfg {
        noise_rms: raw.noise_rms.unwrap_or(0.0),
        sections,
        reflectors,
        connectors: raw.connectors.unwrap_or_default(),
    }
}

impl Scenario {
    /// Parse, resolve defaults, and validate.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawScenario =
            toml::from_str(text).map_err(|e| Error::ScenarioParse(e.to_string()))?;

        let p = raw.probe.unwrap_or_default();
        let pd = ProbeCfg::default();
        let c = raw.clock.unwrap_or_default();
        let cd = ClockCfg::default();
        let st = raw.station.unwrap_or_default();
        let sd = StationCfg::default();
        let a = raw.acquisition.unwrap_or_default();
        let ad = AcquisitionCfg::default();
        let b = raw.budget.unwrap_or_default();
        let bd = BudgetCfg::default();

        let scenario = Scenario {
            campaign: raw.campaign,
            seed: raw.seed.unwrap_or(1),
            probe: ProbeCfg {
                seed: p.seed.unwrap_or(pd.seed),
                length_bits: p.length_bits.unwrap_or(pd.length_bits),
                bit_rate_hz: p.bit_rate_hz.unwrap_or(pd.bit_rate_hz),
                oversampling: p.oversampling.unwrap_or(pd.oversampling),
                rolloff: p.rolloff.unwrap_or(pd.rolloff),
            },
            clock: ClockCfg {
                offset_ppb: c.offset_ppb.unwrap_or(cd.offset_ppb),
                jitter_rms_ps: c.jitter_rms_ps.unwrap_or(cd.jitter_rms_ps),
                seed: c.seed.unwrap_or(cd.seed),
            },
            station: StationCfg {
                node_index: st.node_index,
                sw1_jumper_ns: st.sw1_jumper_ns.unwrap_or(sd.sw1_jumper_ns),
                sw2_jumper_ns: st.sw2_jumper_ns.unwrap_or(sd.sw2_jumper_ns),
                tap_loss_db: st.tap_loss_db.unwrap_or(sd.tap_loss_db),
            },
            link: resolve_link(raw.link),
            link_reverse: raw.link_reverse.map(resolve_link),
            acquisition: AcquisitionCfg {
                coarse_oversampling: a.coarse_oversampling.unwrap_or(ad.coarse_oversampling),
                threshold_factor: a.threshold_factor.unwrap_or(ad.threshold_factor),
                fit_halfwidth_bits: a.fit_halfwidth_bits.unwrap_or(ad.fit_halfwidth_bits),
                gate_margin_bits: a.gate_margin_bits.unwrap_or(ad.gate_margin_bits),
                max_node_delay_us: a.max_node_delay_us.unwrap_or(ad.max_node_delay_us),
            },
            budget: BudgetCfg {
                delta_t_k: b.delta_t_k.unwrap_or(bd.delta_t_k),
                temp_coeff_ppm_per_k: b.temp_coeff_ppm_per_k.unwrap_or(bd.temp_coeff_ppm_per_k),
                fit_tol_ps: b.fit_tol_ps.unwrap_or(bd.fit_tol_ps),
            },
            output: raw.output.unwrap_or_default(),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    fn key_err(key: &str, reason: impl Into<String>) -> Error {
        Error::ScenarioKey {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.probe.length_bits < crate::signal::MIN_PROBE_BITS {
            return Err(Self::key_err(
                "probe.length_bits",
                format!(
                    "{} is below the minimum of {}",
                    self.probe.length_bits,
                    crate::signal::MIN_PROBE_BITS
                ),
            ));
        }
        if !(self.probe.bit_rate_hz > 0.0) || !self.probe.bit_rate_hz.is_finite() {
            return Err(Self::key_err("probe.bit_rate_hz", "must be positive"));
        }
        if self.probe.oversampling < 1 {
            return Err(Self::key_err("probe.oversampling", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.probe.rolloff) {
            return Err(Self::key_err("probe.rolloff", "must lie in [0, 1]"));
        }
        if !(self.clock.jitter_rms_ps >= 0.0) {
            return Err(Self::key_err("clock.jitter_rms_ps", "must be non-negative"));
        }
        if !(self.station.sw1_jumper_ns > 0.0) {
            return Err(Self::key_err("station.sw1_jumper_ns", "must be positive"));
        }
        if !(self.station.sw2_jumper_ns > 0.0) {
            return Err(Self::key_err("station.sw2_jumper_ns", "must be positive"));
        }
        if self.acquisition.coarse_oversampling < 1 {
            return Err(Self::key_err(
                "acquisition.coarse_oversampling",
                "must be at least 1",
            ));
        }
        if !(self.acquisition.threshold_factor > 0.0) {
            return Err(Self::key_err(
                "acquisition.threshold_factor",
                "must be positive",
            ));
        }
        if !(self.budget.fit_tol_ps >= 0.0) {
            return Err(Self::key_err("budget.fit_tol_ps", "must be non-negative"));
        }

        self.validate_link("link", &self.link)?;
        match (self.campaign, &self.link_reverse) {
            (CampaignKind::Asymmetry, Some(rev)) => self.validate_link("link_reverse", rev)?,
            (CampaignKind::Asymmetry, None) => {
                return Err(Self::key_err(
                    "link_reverse",
                    "asymmetry campaigns need the reverse direction",
                ));
            }
            (_, Some(_)) => {
                return Err(Self::key_err(
                    "link_reverse",
                    "only valid for asymmetry campaigns",
                ));
            }
            (_, None) => {}
        }

        if let Some(i) = self.station.node_index {
            let is_node = matches!(
                self.link.sections.get(i),
                Some(SectionCfg::Node { .. })
            );
            if !is_node {
                return Err(Self::key_err(
                    "station.node_index",
                    format!("section {i} is not a node"),
                ));
            }
        }
        if self.campaign == CampaignKind::Node && self.station.node_index.is_none() {
            return Err(Self::key_err(
                "station.node_index",
                "node campaigns need the station's node",
            ));
        }

        // Final structural check through the simulator's own validation.
        self.topology(&self.link)
            .validate()
            .map_err(|e| Self::key_err("link", e.to_string()))?;
        if let Some(rev) = &self.link_reverse {
            self.topology(rev)
                .validate()
                .map_err(|e| Self::key_err("link_reverse", e.to_string()))?;
        }
        Ok(())
    }

    fn validate_link(&self, prefix: &str, link: &LinkCfg) -> Result<()> {
        if link.sections.is_empty() {
            return Err(Self::key_err(
                &format!("{prefix}.sections"),
                "at least one section is required",
            ));
        }
        if !(link.noise_rms >= 0.0) {
            return Err(Self::key_err(
                &format!("{prefix}.noise_rms"),
                "must be non-negative",
            ));
        }
        for (i, s) in link.sections.iter().enumerate() {
            match s {
                SectionCfg::Fiber {
                    length_m,
                    unit_delay_ns_per_m,
                    attenuation_db_per_km,
                    ..
                } => {
                    if !(*length_m >= 0.0) {
                        return Err(Self::key_err(
                            &format!("{prefix}.sections[{i}].length_m"),
                            "must be non-negative",
                        ));
                    }
                    if !(*unit_delay_ns_per_m > 0.0) {
                        return Err(Self::key_err(
                            &format!("{prefix}.sections[{i}].unit_delay_ns_per_m"),
                            "must be positive",
                        ));
                    }
                    if !(*attenuation_db_per_km >= 0.0) {
                        return Err(Self::key_err(
                            &format!("{prefix}.sections[{i}].attenuation_db_per_km"),
                            "must be non-negative",
                        ));
                    }
                }
                SectionCfg::Node {
                    internal_delay_ns, ..
                } => {
                    if !(*internal_delay_ns >= 0.0) {
                        return Err(Self::key_err(
                            &format!("{prefix}.sections[{i}].internal_delay_ns"),
                            "must be non-negative",
                        ));
                    }
                }
            }
        }
        if link.reflectors.len() != link.sections.len() + 1 {
            return Err(Self::key_err(
                &format!("{prefix}.reflectors"),
                format!(
                    "{} sections need {} reflectors, found {}",
                    link.sections.len(),
                    link.sections.len() + 1,
                    link.reflectors.len()
                ),
            ));
        }
        for (i, r) in link.reflectors.iter().enumerate() {
            if !(r.reflectance_db < 0.0) {
                return Err(Self::key_err(
                    &format!("{prefix}.reflectors[{i}].reflectance_db"),
                    "must be negative",
                ));
            }
            if !(r.insertion_loss_db >= 0.0) {
                return Err(Self::key_err(
                    &format!("{prefix}.reflectors[{i}].insertion_loss_db"),
                    "must be non-negative",
                ));
            }
            if r.kind == ReflectorKind::Coupler && r.calibration_offset_ps != 0.0 {
                return Err(Self::key_err(
                    &format!("{prefix}.reflectors[{i}].calibration_offset_ps"),
                    "couplers have no calibration offset",
                ));
            }
            if !(r.calibration_offset_ps >= 0.0) {
                return Err(Self::key_err(
                    &format!("{prefix}.reflectors[{i}].calibration_offset_ps"),
                    "must be non-negative",
                ));
            }
        }
        for (i, c) in link.connectors.iter().enumerate() {
            match link.sections.get(c.section) {
                Some(SectionCfg::Fiber { length_m, .. }) => {
                    if !(c.position_m >= 0.0 && c.position_m <= *length_m) {
                        return Err(Self::key_err(
                            &format!("{prefix}.connectors[{i}].position_m"),
                            format!("outside the {length_m} m span"),
                        ));
                    }
                }
                _ => {
                    return Err(Self::key_err(
                        &format!("{prefix}.connectors[{i}].section"),
                        "must index a fiber section",
                    ));
                }
            }
            if !(c.reflectance_db < 0.0) {
                return Err(Self::key_err(
                    &format!("{prefix}.connectors[{i}].reflectance_db"),
                    "must be negative",
                ));
            }
        }
        Ok(())
    }

    // -----------------------------------------------------------------
    // Builders into the simulation types
    // -----------------------------------------------------------------

    pub fn probe_sequence(&self) -> Result<ProbeSequence> {
        generate_probe(
            self.probe.seed,
            self.probe.length_bits,
            self.probe.bit_rate_hz,
        )
    }

    pub fn clock_model(&self) -> ClockModel {
        ClockModel {
            fractional_offset: self.clock.offset_ppb * 1e-9,
            jitter_rms_s: self.clock.jitter_rms_ps * 1e-12,
            seed: self.clock.seed,
        }
    }

    pub fn station_site(&self) -> StationSite {
        match self.station.node_index {
            Some(i) => StationSite::Node(i),
            None => StationSite::RxEnd,
        }
    }

    pub fn topology(&self, link: &LinkCfg) -> LinkTopology {
        let sections = link
            .sections
            .iter()
            .map(|s| match s {
                SectionCfg::Fiber {
                    length_m,
                    unit_delay_ns_per_m,
                    attenuation_db_per_km,
                    temp_coeff_ppm_per_k,
                    temperature_offset_k,
                } => Section::Fiber(FiberSpan {
                    length_m: *length_m,
                    unit_delay_s_per_m: unit_delay_ns_per_m * 1e-9,
                    attenuation_db_per_km: *attenuation_db_per_km,
                    temp_coeff_ppm_per_k: *temp_coeff_ppm_per_k,
                    temperature_offset_k: *temperature_offset_k,
                }),
                SectionCfg::Node {
                    internal_delay_ns,
                    gain_db,
                    unidirectional,
                } => Section::Node(NodeDevice {
                    internal_delay_s: internal_delay_ns * 1e-9,
                    gain_db: *gain_db,
                    unidirectional: *unidirectional,
                }),
            })
            .collect();
        let reflectors = link
            .reflectors
            .iter()
            .map(|r| DelimitingReflector {
                kind: r.kind,
                reflectance_db: r.reflectance_db,
                insertion_loss_db: r.insertion_loss_db,
                calibration_offset_s: r.calibration_offset_ps * 1e-12,
            })
            .collect();
        let connectors = link
            .connectors
            .iter()
            .map(|c| ConnectorReflection {
                section: c.section,
                position_m: c.position_m,
                reflectance_db: c.reflectance_db,
            })
            .collect();
        LinkTopology {
            sections,
            reflectors,
            connectors,
            noise_rms: link.noise_rms,
            station: Station {
                site: self.station_site(),
                sw1_jumper_s: self.station.sw1_jumper_ns * 1e-9,
                sw2_jumper_s: self.station.sw2_jumper_ns * 1e-9,
                tap_loss_db: self.station.tap_loss_db,
            },
        }
    }

    pub fn acquisition_config(&self) -> AcquisitionConfig {
        AcquisitionConfig {
            coarse_oversampling: self.acquisition.coarse_oversampling,
            oversampling: self.probe.oversampling,
            rolloff: self.probe.rolloff,
            threshold_factor: self.acquisition.threshold_factor,
            fit_halfwidth_bits: self.acquisition.fit_halfwidth_bits,
            gate_margin_bits: self.acquisition.gate_margin_bits,
            max_node_delay_s: self.acquisition.max_node_delay_us * 1e-6,
        }
    }

    pub fn budget_assumptions(&self) -> BudgetAssumptions {
        BudgetAssumptions {
            delta_t_k: self.budget.delta_t_k,
            coeff_ppm_per_k: self.budget.temp_coeff_ppm_per_k,
        }
    }

    /// Ground-truth one-way total of the forward link.
    pub fn nominal_total_one_way(&self) -> f64 {
        self.topology(&self.link).total_one_way_true()
    }

    /// Closed-form budget report; no simulation.
    pub fn closed_form_budget(&self) -> MeasurementReport {
        let total = self.nominal_total_one_way();
        let clock = self.clock_model();
        let fit_tol = self.budget.fit_tol_ps * 1e-12;
        MeasurementReport {
            sections: Vec::new(),
            total_one_way: total,
            reverse_sections: None,
            reverse_total_one_way: None,
            asymmetry: None,
            clock: clock.clone(),
            error_budget: crate::budget::ErrorBudget::new(
                budget::clock_error(total, clock.fractional_offset),
                budget::temperature_error(
                    total,
                    self.budget.delta_t_k,
                    self.budget.temp_coeff_ppm_per_k,
                ),
                fit_tol,
            ),
        }
    }

    /// Execute the campaign. `seed_override` replaces the scenario's master
    /// seed; everything else comes from the file.
    pub fn run(&self, seed_override: Option<u64>) -> Result<RunOutcome> {
        self.validate()?;
        let master = seed_override.unwrap_or(self.seed);
        let probe = self.probe_sequence()?;
        let clock = self.clock_model();
        let acq = self.acquisition_config();
        let assumptions = self.budget_assumptions();

        match self.campaign {
            CampaignKind::Budget => Ok(RunOutcome {
                report: self.closed_form_budget(),
                trace_dumps: Vec::new(),
            }),
            CampaignKind::Span => {
                let mut m = Measurer::new(
                    self.topology(&self.link),
                    probe,
                    clock.clone(),
                    acq,
                    master,
                )?;
                m.collect_traces = self.output.emit_traces;
                let section = m.measure_span(self.station_site())?;
                let report = single_section_report(section, &clock, &assumptions);
                Ok(RunOutcome {
                    report,
                    trace_dumps: m.trace_dumps,
                })
            }
            CampaignKind::Node => {
                let node_index = self.station.node_index.expect("validated");
                let mut m = Measurer::new(
                    self.topology(&self.link),
                    probe,
                    clock.clone(),
                    acq,
                    master,
                )?;
                m.collect_traces = self.output.emit_traces;
                let section = m.measure_node(node_index, None)?;
                let report = single_section_report(section, &clock, &assumptions);
                Ok(RunOutcome {
                    report,
                    trace_dumps: m.trace_dumps,
                })
            }
            CampaignKind::Link => {
                let mut m = Measurer::new(
                    self.topology(&self.link),
                    probe,
                    clock.clone(),
                    acq,
                    master,
                )?;
                m.collect_traces = self.output.emit_traces;
                let report = m.measure_link(&assumptions)?;
                Ok(RunOutcome {
                    report,
                    trace_dumps: m.trace_dumps,
                })
            }
            CampaignKind::Asymmetry => {
                let rev = self.link_reverse.as_ref().expect("validated");
                let report = measure_asymmetry(
                    self.topology(&self.link),
                    self.topology(rev),
                    &clock,
                    &clock,
                    &probe,
                    &acq,
                    master,
                    &assumptions,
                )?;
                Ok(RunOutcome {
                    report,
                    trace_dumps: Vec::new(),
                })
            }
        }
    }
}

/// Result of executing a scenario.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MeasurementReport,
    pub trace_dumps: Vec<TraceDump>,
}

fn single_section_report(
    section: crate::protocol::SectionDelay,
    clock: &ClockModel,
    assumptions: &BudgetAssumptions,
) -> MeasurementReport {
    let total = section.one_way_delay;
    let fit = section.uncertainty;
    MeasurementReport {
        sections: vec![section],
        total_one_way: total,
        reverse_sections: None,
        reverse_total_one_way: None,
        asymmetry: None,
        clock: clock.clone(),
        error_budget: crate::budget::ErrorBudget::new(
            budget::clock_error(total, clock.fractional_offset),
            budget::temperature_error(total, assumptions.delta_t_k, assumptions.coeff_ppm_per_k),
            fit,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
campaign = "span"

[[link.sections]]
kind = "fiber"
length_m = 10000.0
"#;

    #[test]
    fn minimal_scenario_resolves_all_defaults() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(s.campaign, CampaignKind::Span);
        assert_eq!(s.probe.bit_rate_hz, 10e9);
        assert_eq!(s.probe.length_bits, 1024);
        assert_eq!(s.probe.oversampling, 4);
        assert_eq!(s.budget.temp_coeff_ppm_per_k, 7.0);
        match &s.link.sections[0] {
            SectionCfg::Fiber {
                unit_delay_ns_per_m,
                attenuation_db_per_km,
                temp_coeff_ppm_per_k,
                ..
            } => {
                assert_eq!(*unit_delay_ns_per_m, 5.0);
                assert_eq!(*attenuation_db_per_km, 0.2);
                assert_eq!(*temp_coeff_ppm_per_k, 7.0);
            }
            _ => panic!("expected a fiber section"),
        }
        assert_eq!(s.link.reflectors.len(), 2);
        assert_eq!(s.link.reflectors[0].reflectance_db, -7.0);
        assert_eq!(s.link.reflectors[0].insertion_loss_db, 1.0);
    }

    #[test]
    fn negative_length_is_rejected_naming_the_key() {
        let text = MINIMAL.replace("length_m = 10000.0", "length_m = -3.0");
        match Scenario::from_toml_str(&text) {
            Err(Error::ScenarioKey { key, .. }) => {
                assert_eq!(key, "link.sections[0].length_m");
            }
            other => panic!("expected a key error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[probe]\nbandwidth_ghz = 10.0\n");
        match Scenario::from_toml_str(&text) {
            Err(Error::ScenarioParse(msg)) => {
                assert!(msg.contains("bandwidth_ghz"), "message: {msg}");
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_are_distinct_from_key_errors() {
        match Scenario::from_toml_str("campaign = ") {
            Err(Error::ScenarioParse(_)) => {}
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_serialize_load_round_trips() {
        let s1 = Scenario::from_toml_str(MINIMAL).unwrap();
        let text = s1.to_toml_string();
        let s2 = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn asymmetry_needs_reverse_link() {
        let text = MINIMAL.replace("campaign = \"span\"", "campaign = \"asymmetry\"");
        match Scenario::from_toml_str(&text) {
            Err(Error::ScenarioKey { key, .. }) => assert_eq!(key, "link_reverse"),
            other => panic!("expected a key error, got {other:?}"),
        }
    }

    #[test]
    fn node_campaign_needs_station_index() {
        let text = r#"
campaign = "node"

[[link.sections]]
kind = "fiber"
length_m = 1000.0

[[link.sections]]
kind = "node"
internal_delay_ns = 50.0

[[link.sections]]
kind = "fiber"
length_m = 1000.0
"#;
        match Scenario::from_toml_str(text) {
            Err(Error::ScenarioKey { key, .. }) => assert_eq!(key, "station.node_index"),
            other => panic!("expected a key error, got {other:?}"),
        }
        let with_station = format!("{text}\n[station]\nnode_index = 1\n");
        assert!(Scenario::from_toml_str(&with_station).is_ok());
    }

    #[test]
    fn reflector_count_mismatch_is_rejected() {
        let text = format!(
            "{MINIMAL}\n[[link.reflectors]]\nkind = \"coupler\"\nreflectance_db = -7.0\n"
        );
        match Scenario::from_toml_str(&text) {
            Err(Error::ScenarioKey { key, .. }) => assert_eq!(key, "link.reflectors"),
            other => panic!("expected a key error, got {other:?}"),
        }
    }

    #[test]
    fn span_scenario_runs_end_to_end() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        let out = s.run(None).unwrap();
        let truth = s.nominal_total_one_way();
        assert!((out.report.total_one_way - truth).abs() < 2e-12);
        // Same seed, same outcome.
        let out2 = s.run(None).unwrap();
        assert_eq!(out.report, out2.report);
    }

    #[test]
    fn budget_campaign_is_closed_form() {
        let text = r#"
campaign = "budget"

[clock]
offset_ppb = 100000.0

[budget]
delta_t_k = 0.01

[[link.sections]]
kind = "fiber"
length_m = 100000.0
"#;
        let s = Scenario::from_toml_str(text).unwrap();
        let out = s.run(None).unwrap();
        let b = out.report.error_budget;
        assert!((b.clock_term - 50e-9).abs() < 1e-15, "clock {}", b.clock_term);
        assert!(
            (b.temperature_term - 35e-12).abs() < 1e-18,
            "temperature {}",
            b.temperature_term
        );
        assert!((b.fit_term - 5e-12).abs() < 1e-18);
    }
}
