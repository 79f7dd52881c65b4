//! The switched three-step measurement procedure and link-wide campaigns.
//!
//! Per node, the steps are:
//!
//! 1. Switch 1 only: echoes come back from the reflector just upstream of
//!    the node and from the far end of the attached span. Half the
//!    difference of the two fitted round-trip times is the span's one-way
//!    delay; the near round-trip time is kept for step 3.
//! 2. Switch 2 only: the echo from the reflector just downstream of the
//!    node gives its round-trip time.
//! 3. Both switches: the probe turns around at the upstream reflector,
//!    crosses the node forward, and exits through the switch-2 tap. The
//!    node's single-pass delay is the fitted transit time minus half of
//!    each recorded round-trip time (plus the calibrated reflector-spacing
//!    corrections).
//!
//! Every acquisition runs a coarse one-sample-per-bit pass over the full
//! record to locate peaks, then a gated high-resolution pass around each
//! peak; key numbers stay in receiver-clock units throughout, so measuring
//! both directions of a fiber pair with the same clock cancels the clock's
//! first-order error in their difference.

use crate::budget::{self, ErrorBudget};
use crate::correlator::{
    cross_correlate, detect_peaks, fit_peak, fitted_curve, CorrelationMethod, CorrelationTrace,
    DelayEstimate,
};
use crate::error::{Error, Result};
use crate::link::{
    enumerate_echoes, synthesize_received, ClockModel, LinkTopology, Section, StationSite,
    SwitchState,
};
use crate::signal::{shape_waveform, ProbeSequence, SampledWaveform};

/// Tunables of the acquisition pipeline. Defaults match the probe defaults:
/// coarse pass at one sample per bit, fine passes at the configured
/// oversampling, fit window of two bit durations half-width.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionConfig {
    /// Oversampling of the coarse localization pass.
    pub coarse_oversampling: u32,
    /// Oversampling of the gated high-resolution passes.
    pub oversampling: u32,
    /// Pulse-shaping roll-off for both references.
    pub rolloff: f64,
    /// Peak detection threshold in robust-noise-floor units.
    pub threshold_factor: f64,
    /// Fit window half-width in bit durations.
    pub fit_halfwidth_bits: f64,
    /// Gated window margin around a located burst, in bit durations.
    pub gate_margin_bits: f64,
    /// Upper bound used when forming the transmissive association window.
    pub max_node_delay_s: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            coarse_oversampling: 1,
            oversampling: 4,
            rolloff: 0.3,
            threshold_factor: 8.0,
            fit_halfwidth_bits: 2.0,
            gate_margin_bits: 24.0,
            max_node_delay_s: 10e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    Fiber,
    Node,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelaySource {
    Reflective,
    Transmissive,
}

/// One measured link section.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionDelay {
    pub section_id: String,
    pub kind: SectionKind,
    pub one_way_delay: f64,
    pub source: DelaySource,
    pub uncertainty: f64,
}

/// A full campaign result. All times are receiver-clock seconds; the clock
/// description records what that means in true time.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementReport {
    pub sections: Vec<SectionDelay>,
    pub total_one_way: f64,
    pub reverse_sections: Option<Vec<SectionDelay>>,
    pub reverse_total_one_way: Option<f64>,
    /// Forward total minus reverse total, when both directions were run.
    pub asymmetry: Option<f64>,
    pub clock: ClockModel,
    pub error_budget: ErrorBudget,
}

impl MeasurementReport {
    fn total(sections: &[SectionDelay]) -> f64 {
        sections.iter().map(|s| s.one_way_delay).sum()
    }

    fn fit_term(sections: &[SectionDelay]) -> f64 {
        sections
            .iter()
            .map(|s| s.uncertainty * s.uncertainty)
            .sum::<f64>()
            .sqrt()
    }
}

/// Temperature excursion assumed when quoting the budget's thermal term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetAssumptions {
    pub delta_t_k: f64,
    pub coeff_ppm_per_k: f64,
}

impl Default for BudgetAssumptions {
    fn default() -> Self {
        Self {
            delta_t_k: 0.0,
            coeff_ppm_per_k: crate::link::DEFAULT_TEMP_COEFF_PPM_PER_K,
        }
    }
}

/// A correlation-trace excerpt kept for plotting: the samples around one
/// fitted peak plus the fitted lobe at ten times the trace resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDump {
    pub label: String,
    pub segment: CorrelationTrace,
    pub overlay: Vec<(f64, f64)>,
    pub estimate: DelayEstimate,
}

/// An expected echo to associate and fit in one acquisition.
struct Target {
    label: String,
    /// Expected receiver-axis lag, from the nominal plant description.
    expected: f64,
    /// Association half-window.
    halfwidth: f64,
}

/// Runs acquisitions against one link topology with one probe and clock.
pub struct Measurer {
    link: LinkTopology,
    clock: ClockModel,
    probe: ProbeSequence,
    acq: AcquisitionConfig,
    coarse_ref: SampledWaveform,
    fine_ref: SampledWaveform,
    master_seed: u64,
    acquisitions: u64,
    pub collect_traces: bool,
    pub trace_dumps: Vec<TraceDump>,
}

impl Measurer {
    pub fn new(
        link: LinkTopology,
        probe: ProbeSequence,
        clock: ClockModel,
        acq: AcquisitionConfig,
        master_seed: u64,
    ) -> Result<Self> {
        link.validate()?;
        let coarse_ref = shape_waveform(&probe, acq.coarse_oversampling, acq.rolloff)?;
        let fine_ref = shape_waveform(&probe, acq.oversampling, acq.rolloff)?;
        Ok(Self {
            link,
            clock,
            probe,
            acq,
            coarse_ref,
            fine_ref,
            master_seed,
            acquisitions: 0,
            collect_traces: false,
            trace_dumps: Vec::new(),
        })
    }

    pub fn link(&self) -> &LinkTopology {
        &self.link
    }

    fn bit_duration(&self) -> f64 {
        self.probe.bit_duration()
    }

    fn next_noise_seed(&mut self) -> u64 {
        self.acquisitions += 1;
        splitmix(self.master_seed ^ self.acquisitions.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Upper bound on any echo's round trip, from the plant description.
    fn round_trip_bound(&self, topo: &LinkTopology) -> f64 {
        let travel: f64 = topo.sections.iter().map(|s| s.one_way_delay()).sum();
        let cal: f64 = topo
            .reflectors
            .iter()
            .map(|r| r.calibration_offset_s)
            .sum();
        2.0 * (topo.station.sw1_jumper_s + topo.station.sw2_jumper_s + travel + cal) + 1e-6
    }

    fn stationed(&self, site: StationSite) -> LinkTopology {
        let mut topo = self.link.clone();
        topo.station.site = site;
        topo
    }

    /// Association half-window around an expected lag: wide enough for any
    /// plausible clock offset and thermal drift, floored at a few bits.
    fn association_halfwidth(&self, expected: f64) -> f64 {
        2e-4 * expected.abs() + 8.0 * self.bit_duration()
    }

    /// Shrink association windows so neighboring targets cannot swallow each
    /// other; targets closer than a main lobe share their window (and will
    /// resolve to the same fitted peak when they physically coincide).
    fn clamp_target_windows(&self, targets: &mut [Target]) {
        let lobe = 4.0 * self.bit_duration();
        let expected: Vec<f64> = targets.iter().map(|t| t.expected).collect();
        for (i, t) in targets.iter_mut().enumerate() {
            let mut nearest = f64::INFINITY;
            for (j, &e) in expected.iter().enumerate() {
                if i != j {
                    nearest = nearest.min((t.expected - e).abs());
                }
            }
            if nearest.is_finite() && nearest > lobe {
                t.halfwidth = t.halfwidth.min(0.45 * nearest);
            }
        }
    }

    /// One full acquisition: coarse localization over the whole record, then
    /// a gated high-resolution pass and fit per target.
    fn acquire(
        &mut self,
        topo: &LinkTopology,
        state: SwitchState,
        targets: &[Target],
    ) -> Result<Vec<DelayEstimate>> {
        let echoes = enumerate_echoes(topo, state)?;
        let apparent: Vec<f64> = echoes
            .echoes()
            .iter()
            .map(|e| self.clock.apparent_delay(e.delay))
            .collect();

        // Coarse pass over the full range.
        let bit = self.bit_duration();
        let coarse_guard = 8.0 * bit * self.acq.coarse_oversampling as f64;
        let record_start = apparent
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
            .min(0.0)
            - coarse_guard;
        let record_end = self.round_trip_bound(topo) + self.coarse_ref.duration() + coarse_guard;
        let seed = self.next_noise_seed();
        let coarse_rx = synthesize_received(
            &echoes,
            &self.coarse_ref,
            &self.clock,
            topo.noise_rms,
            seed,
            Some((record_start, record_end)),
        )?;
        let coarse_trace = cross_correlate(&coarse_rx, &self.coarse_ref, CorrelationMethod::Fft)?;
        let coarse_sep = 2 * self.acq.coarse_oversampling as usize;
        let coarse_peaks = detect_peaks(&coarse_trace, self.acq.threshold_factor, coarse_sep);

        let mut located = Vec::with_capacity(targets.len());
        for t in targets {
            let best = coarse_peaks
                .iter()
                .filter(|p| (coarse_trace.lag_at(p.index) - t.expected).abs() <= t.halfwidth)
                .max_by(|a, b| a.value.partial_cmp(&b.value).unwrap());
            match best {
                Some(p) => located.push(coarse_trace.lag_at(p.index)),
                None => {
                    return Err(Error::Measurement {
                        section: t.label.clone(),
                        reason: format!(
                            "no echo located within {:.3e} s of the expected lag {:.6e} s",
                            t.halfwidth, t.expected
                        ),
                    });
                }
            }
        }

        // Gated fine pass per target.
        let burst = self.fine_ref.duration();
        let margin = self.acq.gate_margin_bits * bit;
        let fine_sep = 2 * self.acq.oversampling as usize;
        let hw = (self.acq.fit_halfwidth_bits * self.acq.oversampling as f64).round() as usize;
        let mut estimates = Vec::with_capacity(targets.len());
        for (t, &loc) in targets.iter().zip(&located) {
            let (w0, w1) = grow_window(
                (loc - margin, loc + burst + margin),
                &apparent,
                burst,
                4.0 * bit + 2.0 * self.fine_ref.sample_period(),
            );
            let seed = self.next_noise_seed();
            let rx = synthesize_received(
                &echoes,
                &self.fine_ref,
                &self.clock,
                topo.noise_rms,
                seed,
                Some((w0, w1)),
            )?;
            let trace = cross_correlate(&rx, &self.fine_ref, CorrelationMethod::Fft)?;
            let peaks = detect_peaks(&trace, self.acq.threshold_factor, fine_sep);
            let assoc = 4.0 * bit;
            let best = peaks
                .iter()
                .filter(|p| (trace.lag_at(p.index) - loc).abs() <= assoc)
                .max_by(|a, b| a.value.partial_cmp(&b.value).unwrap())
                .ok_or_else(|| Error::Measurement {
                    section: t.label.clone(),
                    reason: "echo found by the coarse pass vanished in the gated pass".into(),
                })?;
            let est = fit_peak(&trace, best.index, hw).map_err(|e| Error::Measurement {
                section: t.label.clone(),
                reason: e.to_string(),
            })?;
            if self.collect_traces {
                self.trace_dumps.push(make_dump(
                    &t.label,
                    &trace,
                    best.index,
                    hw,
                    &est,
                ));
            }
            estimates.push(est);
        }
        Ok(estimates)
    }

    /// Expected round-trip time to a reflector reached through switch 1
    /// (upstream), from the nominal plant description.
    fn expected_upstream_rtt(&self, topo: &LinkTopology, reflector: usize) -> f64 {
        let tap = match topo.station.site {
            StationSite::Node(i) => i,
            StationSite::RxEnd => topo.sections.len(),
        };
        let mut t = topo.station.sw1_jumper_s;
        for s in reflector..tap {
            t += topo.sections[s].one_way_delay();
        }
        let raw = 2.0 * t + topo.reflectors[reflector].calibration_offset_s;
        self.clock.apparent_delay(raw)
    }

    /// Expected round-trip time to the reflector just downstream of the
    /// station's node, through switch 2.
    fn expected_downstream_rtt(&self, topo: &LinkTopology, reflector: usize) -> f64 {
        let raw = 2.0 * topo.station.sw2_jumper_s + topo.reflectors[reflector].calibration_offset_s;
        self.clock.apparent_delay(raw)
    }

    /// Step 1 at a station: measure the spans upstream of the tap, pairwise
    /// between consecutive reflectors, in one switch-1 acquisition. Returns
    /// the fitted raw round-trip estimate per targeted reflector (nearest
    /// first) along with the span delays.
    pub fn measure_upstream_spans(
        &mut self,
        site: StationSite,
    ) -> Result<(Vec<SectionDelay>, Vec<DelayEstimate>)> {
        let topo = self.stationed(site);
        let tap_reflector = match site {
            StationSite::Node(i) => i,
            StationSite::RxEnd => topo.sections.len(),
        };
        if tap_reflector == 0 {
            return Err(Error::Measurement {
                section: format!("station at reflector {tap_reflector}"),
                reason: "no span upstream of the station".into(),
            });
        }
        // Reach back over consecutive fiber sections.
        let mut first_reflector = tap_reflector;
        while first_reflector > 0 {
            match &topo.sections[first_reflector - 1] {
                Section::Fiber(_) => first_reflector -= 1,
                Section::Node(_) => break,
            }
        }
        if first_reflector == tap_reflector {
            return Err(Error::Measurement {
                section: format!("section {}", tap_reflector - 1),
                reason: "the section upstream of the station is not a fiber span".into(),
            });
        }

        let mut targets: Vec<Target> = (first_reflector..=tap_reflector)
            .map(|r| {
                let expected = self.expected_upstream_rtt(&topo, r);
                Target {
                    label: format!("reflector-{r}"),
                    expected,
                    halfwidth: self.association_halfwidth(expected),
                }
            })
            .collect();
        self.clamp_target_windows(&mut targets);
        let estimates = self.acquire(&topo, SwitchState::SW1_ONLY, &targets)?;

        // Pairwise span delays between consecutive reflectors, nearest pair
        // first; reflector epochs are corrected by their calibration offsets.
        let mut spans = Vec::new();
        for (k, span_reflector) in (first_reflector..tap_reflector).enumerate() {
            let far = &estimates[k];
            let near = &estimates[k + 1];
            let far_rtt = far.delay - topo.reflectors[span_reflector].calibration_offset_s;
            let near_rtt = near.delay - topo.reflectors[span_reflector + 1].calibration_offset_s;
            spans.push(SectionDelay {
                section_id: format!("span-{span_reflector}"),
                kind: SectionKind::Fiber,
                one_way_delay: 0.5 * (far_rtt - near_rtt),
                source: DelaySource::Reflective,
                uncertainty: 0.5
                    * (far.uncertainty * far.uncertainty + near.uncertainty * near.uncertainty)
                        .sqrt(),
            });
        }
        spans.reverse(); // link order: most upstream span first
        Ok((spans, estimates))
    }

    /// Step 1 for exactly the span attached upstream of a station.
    pub fn measure_span(&mut self, site: StationSite) -> Result<SectionDelay> {
        let (mut spans, _) = self.measure_upstream_spans(site)?;
        Ok(spans.pop().expect("at least one span measured"))
    }

    /// Steps 1-3 for the node at `node_index`. `recorded_rtt2` carries the
    /// step-1 fit of the upstream reflector when the caller already ran it;
    /// otherwise step 1 is executed here.
    pub fn measure_node(
        &mut self,
        node_index: usize,
        recorded_rtt2: Option<DelayEstimate>,
    ) -> Result<SectionDelay> {
        let site = StationSite::Node(node_index);
        let topo = self.stationed(site);
        topo.validate()?;
        let node = match &topo.sections[node_index] {
            Section::Node(n) => n.clone(),
            Section::Fiber(_) => {
                return Err(Error::Measurement {
                    section: format!("section {node_index}"),
                    reason: "not a node".into(),
                });
            }
        };

        // Step 1: round trip to the upstream reflector.
        let rtt2 = match recorded_rtt2 {
            Some(est) => est,
            None => {
                let expected = self.expected_upstream_rtt(&topo, node_index);
                let mut targets = vec![Target {
                    label: format!("reflector-{node_index}"),
                    expected,
                    halfwidth: self.association_halfwidth(expected),
                }];
                self.clamp_target_windows(&mut targets);
                self.acquire(&topo, SwitchState::SW1_ONLY, &targets)?[0]
            }
        };

        // Step 2: round trip to the downstream reflector.
        let rtt3 = {
            let expected = self.expected_downstream_rtt(&topo, node_index + 1);
            let mut targets = vec![Target {
                label: format!("reflector-{}", node_index + 1),
                expected,
                halfwidth: self.association_halfwidth(expected),
            }];
            self.clamp_target_windows(&mut targets);
            self.acquire(&topo, SwitchState::SW2_ONLY, &targets)?[0]
        };

        // Step 3: transmissive transit. The record also contains the
        // reflective echoes of both taps; the association window is centered
        // on the expected transit and kept clear of them.
        let cal_in = topo.reflectors[node_index].calibration_offset_s;
        let cal_out = topo.reflectors[node_index + 1].calibration_offset_s;
        let transit = {
            let expected = self.clock.apparent_delay(
                topo.station.sw1_jumper_s
                    + cal_in
                    + node.internal_delay_s
                    + topo.station.sw2_jumper_s,
            );
            let mut halfwidth = self.association_halfwidth(expected);
            // Keep the window away from the reflective echoes seen in the
            // same record.
            for refl in [rtt2.delay, rtt3.delay] {
                let dist = (expected - refl).abs();
                if dist > 4.0 * self.bit_duration() {
                    halfwidth = halfwidth.min(0.45 * dist);
                }
            }
            let targets = vec![Target {
                label: format!("node-{node_index}-transit"),
                expected,
                halfwidth,
            }];
            self.acquire(&topo, SwitchState::BOTH, &targets)?[0]
        };

        // Single-pass delay between the two reflector planes. The jumper
        // round trips cancel through the recorded RTTs; the calibration
        // spacings are removed with their calibrated values.
        let one_way = transit.delay - 0.5 * rtt2.delay - 0.5 * rtt3.delay - 0.5 * cal_in
            + 0.5 * cal_out;
        let uncertainty = (transit.uncertainty * transit.uncertainty
            + 0.25 * rtt2.uncertainty * rtt2.uncertainty
            + 0.25 * rtt3.uncertainty * rtt3.uncertainty)
            .sqrt();
        Ok(SectionDelay {
            section_id: format!("node-{node_index}"),
            kind: SectionKind::Node,
            one_way_delay: one_way,
            source: DelaySource::Transmissive,
            uncertainty,
        })
    }

    /// Measure every section of the link and compose the totals.
    ///
    /// Stations are the nodes plus the receive terminal; each station's
    /// switch-1 acquisition measures all consecutive fiber spans upstream of
    /// it, and each node runs the transmissive steps for itself.
    pub fn measure_link(&mut self, assumptions: &BudgetAssumptions) -> Result<MeasurementReport> {
        self.link.validate()?;
        let n_sections = self.link.sections.len();
        let mut by_section: Vec<Option<SectionDelay>> = vec![None; n_sections];

        let node_indices: Vec<usize> = (0..n_sections)
            .filter(|&i| self.link.sections[i].is_node())
            .collect();

        for &i in &node_indices {
            // Spans upstream of this node (if any). The first node of the
            // link may have none when the link starts with the node itself.
            let has_upstream_span = i > 0 && !self.link.sections[i - 1].is_node();
            let rtt2 = if has_upstream_span {
                let (spans, estimates) = self.measure_upstream_spans(StationSite::Node(i))?;
                let near = *estimates.last().expect("near reflector estimate");
                let first = i - spans.len();
                for (k, s) in spans.into_iter().enumerate() {
                    by_section[first + k] = Some(s);
                }
                Some(near)
            } else {
                None
            };
            let node_delay = self.measure_node(i, rtt2)?;
            by_section[i] = Some(node_delay);
        }

        // Spans upstream of the receive terminal.
        if n_sections > 0 && !self.link.sections[n_sections - 1].is_node() {
            let (spans, _) = self.measure_upstream_spans(StationSite::RxEnd)?;
            let first = n_sections - spans.len();
            for (k, s) in spans.into_iter().enumerate() {
                by_section[first + k] = Some(s);
            }
        }

        let mut sections = Vec::with_capacity(n_sections);
        for (i, s) in by_section.into_iter().enumerate() {
            match s {
                Some(s) => sections.push(s),
                None => {
                    return Err(Error::Measurement {
                        section: format!("section {i}"),
                        reason: "no station can reach this section".into(),
                    });
                }
            }
        }

        let total = MeasurementReport::total(&sections);
        let budget = ErrorBudget::new(
            budget::clock_error(total, self.clock.fractional_offset),
            budget::temperature_error(total, assumptions.delta_t_k, assumptions.coeff_ppm_per_k),
            MeasurementReport::fit_term(&sections),
        );
        Ok(MeasurementReport {
            sections,
            total_one_way: total,
            reverse_sections: None,
            reverse_total_one_way: None,
            asymmetry: None,
            clock: self.clock.clone(),
            error_budget: budget,
        })
    }
}

/// Measure both directions of a link pair back-to-back with one shared
/// clock and return the combined report; the asymmetry is the forward total
/// minus the reverse total. Differing clock configurations defeat the
/// common-clock cancellation and are rejected.
#[allow(clippy::too_many_arguments)]
pub fn measure_asymmetry(
    link_ab: LinkTopology,
    link_ba: LinkTopology,
    clock_ab: &ClockModel,
    clock_ba: &ClockModel,
    probe: &ProbeSequence,
    acq: &AcquisitionConfig,
    master_seed: u64,
    assumptions: &BudgetAssumptions,
) -> Result<MeasurementReport> {
    if clock_ab != clock_ba {
        return Err(Error::Measurement {
            section: "asymmetry".into(),
            reason: "the two directions must share one clock configuration".into(),
        });
    }
    let mut fwd = Measurer::new(
        link_ab,
        probe.clone(),
        clock_ab.clone(),
        acq.clone(),
        splitmix(master_seed ^ 0x5157),
    )?;
    let forward = fwd.measure_link(assumptions)?;
    let mut rev = Measurer::new(
        link_ba,
        probe.clone(),
        clock_ab.clone(),
        acq.clone(),
        splitmix(master_seed ^ 0xA2E8),
    )?;
    let reverse = rev.measure_link(assumptions)?;

    let asymmetry = forward.total_one_way - reverse.total_one_way;
    let budget = ErrorBudget::new(
        budget::clock_error(asymmetry.abs(), clock_ab.fractional_offset),
        forward.error_budget.temperature_term + reverse.error_budget.temperature_term,
        (forward.error_budget.fit_term.powi(2) + reverse.error_budget.fit_term.powi(2)).sqrt(),
    );
    Ok(MeasurementReport {
        sections: forward.sections,
        total_one_way: forward.total_one_way,
        reverse_sections: Some(reverse.sections),
        reverse_total_one_way: Some(reverse.total_one_way),
        asymmetry: Some(asymmetry),
        clock: clock_ab.clone(),
        error_budget: budget,
    })
}

/// Expand a gated window until every echo burst that overlaps it (with a
/// guard) is contained in full, so the synthesis never clips a burst.
fn grow_window(
    window: (f64, f64),
    apparent_delays: &[f64],
    burst: f64,
    guard: f64,
) -> (f64, f64) {
    let (mut w0, mut w1) = window;
    loop {
        let mut grown = false;
        for &d in apparent_delays {
            let lo = d - guard;
            let hi = d + burst + guard;
            if hi > w0 && lo < w1 {
                if lo < w0 {
                    w0 = lo;
                    grown = true;
                }
                if hi > w1 {
                    w1 = hi;
                    grown = true;
                }
            }
        }
        if !grown {
            return (w0, w1);
        }
    }
}

fn make_dump(
    label: &str,
    trace: &CorrelationTrace,
    candidate: usize,
    hw: usize,
    est: &DelayEstimate,
) -> TraceDump {
    let reach = 3 * hw;
    let lo = candidate.saturating_sub(reach);
    let hi = (candidate + reach + 1).min(trace.len());
    let segment = CorrelationTrace::new(
        trace.lag_at(lo),
        trace.lag_step(),
        trace.values()[lo..hi].to_vec(),
    );
    TraceDump {
        label: label.to_string(),
        segment,
        overlay: fitted_curve(est, trace, candidate, reach.min(candidate), 10),
        estimate: *est,
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{DelimitingReflector, FiberSpan, NodeDevice, Station};
    use crate::signal::generate_probe;

    fn probe() -> ProbeSequence {
        generate_probe(21, 1024, 10e9).unwrap()
    }

    fn short_probe() -> ProbeSequence {
        generate_probe(21, 256, 10e9).unwrap()
    }

    fn span_node_span(
        len_a_m: f64,
        node_delay_s: f64,
        len_b_m: f64,
    ) -> LinkTopology {
        LinkTopology::chain(vec![
            Section::Fiber(FiberSpan::with_length_m(len_a_m)),
            Section::Node(NodeDevice {
                internal_delay_s: node_delay_s,
                gain_db: 15.0,
                unidirectional: true,
            }),
            Section::Fiber(FiberSpan::with_length_m(len_b_m)),
        ])
    }

    #[test]
    fn span_measurement_recovers_configured_delay() {
        let link = LinkTopology::chain(vec![Section::Fiber(FiberSpan::with_length_m(10_000.0))]);
        let truth = link.sections[0].one_way_delay();
        let mut m = Measurer::new(
            link,
            probe(),
            ClockModel::ideal(),
            AcquisitionConfig::default(),
            1,
        )
        .unwrap();
        let s = m.measure_span(StationSite::RxEnd).unwrap();
        assert_eq!(s.section_id, "span-0");
        assert_eq!(s.kind, SectionKind::Fiber);
        assert_eq!(s.source, DelaySource::Reflective);
        let err = (s.one_way_delay - truth).abs();
        assert!(err < 1e-12, "span error {:.3} ps", err * 1e12);
    }

    #[test]
    fn zero_length_span_measures_zero() {
        let link = LinkTopology::chain(vec![Section::Fiber(FiberSpan::with_length_m(0.0))]);
        let mut m = Measurer::new(
            link,
            short_probe(),
            ClockModel::ideal(),
            AcquisitionConfig::default(),
            2,
        )
        .unwrap();
        let s = m.measure_span(StationSite::RxEnd).unwrap();
        assert!(
            s.one_way_delay.abs() < 1e-12,
            "zero-length span gave {:.3} ps",
            s.one_way_delay * 1e12
        );
    }

    #[test]
    fn tff_calibration_offsets_are_removed() {
        let mut link = LinkTopology::chain(vec![Section::Fiber(FiberSpan::with_length_m(5_000.0))]);
        link.reflectors[0] = DelimitingReflector::tff(4e-9);
        link.reflectors[1] = DelimitingReflector::tff(1.5e-9);
        let truth = link.sections[0].one_way_delay();
        let mut m = Measurer::new(
            link,
            probe(),
            ClockModel::ideal(),
            AcquisitionConfig::default(),
            3,
        )
        .unwrap();
        let s = m.measure_span(StationSite::RxEnd).unwrap();
        let err = (s.one_way_delay - truth).abs();
        assert!(err < 1e-12, "span error with tff offsets {:.3} ps", err * 1e12);
    }

    #[test]
    fn node_transit_formula_recovers_internal_delay() {
        let link = span_node_span(2_000.0, 50e-9, 3_000.0);
        let mut m = Measurer::new(
            link,
            short_probe(),
            ClockModel::ideal(),
            AcquisitionConfig::default(),
            4,
        )
        .unwrap();
        let s = m.measure_node(1, None).unwrap();
        assert_eq!(s.section_id, "node-1");
        assert_eq!(s.source, DelaySource::Transmissive);
        let err = (s.one_way_delay - 50e-9).abs();
        assert!(err < 2e-12, "node error {:.3} ps", err * 1e12);
    }

    #[test]
    fn node_step3_arithmetic_identity() {
        // With coupler reflectors the identity has no calibration terms:
        // transit - rtt2/2 - rtt3/2 equals the node delay to fit tolerance.
        let link = span_node_span(500.0, 120e-9, 800.0);
        let mut m = Measurer::new(
            link,
            short_probe(),
            ClockModel::ideal(),
            AcquisitionConfig::default(),
            5,
        )
        .unwrap();
        let (_, ests) = m.measure_upstream_spans(StationSite::Node(1)).unwrap();
        let rtt2 = *ests.last().unwrap();
        let node = m.measure_node(1, Some(rtt2)).unwrap();
        assert!((node.one_way_delay - 120e-9).abs() < 2e-12);
    }

    #[test]
    fn link_report_composes_sections_and_totals() {
        let link = span_node_span(10_000.0, 50e-9, 20_000.0);
        let truth = link.total_one_way_true();
        let mut m = Measurer::new(
            link,
            probe(),
            ClockModel::ideal(),
            AcquisitionConfig::default(),
            6,
        )
        .unwrap();
        let report = m.measure_link(&BudgetAssumptions::default()).unwrap();
        assert_eq!(report.sections.len(), 3);
        assert_eq!(
            report.sections.iter().map(|s| s.section_id.as_str()).collect::<Vec<_>>(),
            vec!["span-0", "node-1", "span-2"]
        );
        // Composition identity: the stored total is exactly the sum.
        let sum: f64 = report.sections.iter().map(|s| s.one_way_delay).sum();
        assert_eq!(report.total_one_way, sum);
        let err = (report.total_one_way - truth).abs();
        assert!(err < 10e-12, "link total error {:.3} ps", err * 1e12);
    }

    #[test]
    fn single_span_link_equals_span_measurement() {
        let link = LinkTopology::chain(vec![Section::Fiber(FiberSpan::with_length_m(7_500.0))]);
        let mut m1 = Measurer::new(
            link.clone(),
            probe(),
            ClockModel::ideal(),
            AcquisitionConfig::default(),
            7,
        )
        .unwrap();
        let report = m1.measure_link(&BudgetAssumptions::default()).unwrap();
        assert_eq!(report.sections.len(), 1);
        let mut m2 = Measurer::new(
            link,
            probe(),
            ClockModel::ideal(),
            AcquisitionConfig::default(),
            7,
        )
        .unwrap();
        let span = m2.measure_span(StationSite::RxEnd).unwrap();
        assert_eq!(report.total_one_way, span.one_way_delay);
    }

    #[test]
    fn clock_offset_scales_measured_delays() {
        let link = LinkTopology::chain(vec![Section::Fiber(FiberSpan::with_length_m(10_000.0))]);
        let truth = link.sections[0].one_way_delay();
        for offset in [0.0, 20e-9, 100e-6] {
            let mut m = Measurer::new(
                link.clone(),
                probe(),
                ClockModel::with_offset(offset),
                AcquisitionConfig::default(),
                8,
            )
            .unwrap();
            let s = m.measure_span(StationSite::RxEnd).unwrap();
            let expected = truth / (1.0 + offset);
            let err = (s.one_way_delay - expected).abs();
            assert!(
                err < 2e-12,
                "offset {offset:e}: measured {} vs expected {} ({} ps off)",
                s.one_way_delay,
                expected,
                err * 1e12
            );
        }
    }

    #[test]
    fn jumper_length_does_not_move_section_delays() {
        let link = span_node_span(1_000.0, 80e-9, 1_500.0);
        let mut results = Vec::new();
        for jumper in [5e-9, 25e-9, 140e-9] {
            let mut topo = link.clone();
            topo.station = Station {
                site: StationSite::RxEnd,
                sw1_jumper_s: jumper,
                sw2_jumper_s: jumper * 0.7,
                tap_loss_db: 0.0,
            };
            let mut m = Measurer::new(
                topo,
                short_probe(),
                ClockModel::ideal(),
                AcquisitionConfig::default(),
                9,
            )
            .unwrap();
            let report = m.measure_link(&BudgetAssumptions::default()).unwrap();
            results.push(
                report
                    .sections
                    .iter()
                    .map(|s| s.one_way_delay)
                    .collect::<Vec<f64>>(),
            );
        }
        for k in 1..results.len() {
            for (a, b) in results[0].iter().zip(&results[k]) {
                assert!(
                    (a - b).abs() < 2e-12,
                    "jumper change moved a section delay by {} ps",
                    (a - b).abs() * 1e12
                );
            }
        }
    }

    #[test]
    fn asymmetry_of_identical_pair_is_zero() {
        let ab = LinkTopology::chain(vec![Section::Fiber(FiberSpan::with_length_m(10_000.0))]);
        let ba = ab.clone();
        let clock = ClockModel::with_offset(100e-6);
        let report = measure_asymmetry(
            ab,
            ba,
            &clock,
            &clock,
            &probe(),
            &AcquisitionConfig::default(),
            10,
            &BudgetAssumptions::default(),
        )
        .unwrap();
        let asym = report.asymmetry.unwrap();
        assert!(asym.abs() < 2e-12, "asymmetry {} ps", asym * 1e12);
    }

    #[test]
    fn asymmetry_recovers_configured_difference() {
        let ab = LinkTopology::chain(vec![Section::Fiber(FiberSpan::with_length_m(10_000.0))]);
        // 20 m longer: 100 ns more one-way delay.
        let ba = LinkTopology::chain(vec![Section::Fiber(FiberSpan::with_length_m(10_020.0))]);
        let clock = ClockModel::ideal();
        let report = measure_asymmetry(
            ab,
            ba,
            &clock,
            &clock,
            &probe(),
            &AcquisitionConfig::default(),
            11,
            &BudgetAssumptions::default(),
        )
        .unwrap();
        let asym = report.asymmetry.unwrap();
        assert!(
            (asym + 100e-9).abs() < 10e-12,
            "asymmetry {} vs -100 ns",
            asym
        );
    }

    #[test]
    fn asymmetry_rejects_mismatched_clocks() {
        let ab = LinkTopology::chain(vec![Section::Fiber(FiberSpan::with_length_m(1_000.0))]);
        let ba = ab.clone();
        let r = measure_asymmetry(
            ab,
            ba,
            &ClockModel::with_offset(1e-6),
            &ClockModel::with_offset(2e-6),
            &short_probe(),
            &AcquisitionConfig::default(),
            12,
            &BudgetAssumptions::default(),
        );
        assert!(matches!(r, Err(Error::Measurement { .. })));
    }

    #[test]
    fn missing_echo_fails_with_section_identity() {
        // An association window that cannot contain any echo: station with a
        // huge expected-vs-actual mismatch, forced by a wrong plant length.
        let mut link = LinkTopology::chain(vec![Section::Fiber(FiberSpan::with_length_m(100.0))]);
        link.noise_rms = 0.0;
        let mut m = Measurer::new(
            link,
            short_probe(),
            ClockModel::ideal(),
            AcquisitionConfig::default(),
            13,
        )
        .unwrap();
        // Sabotage: pretend the span is 40 km when targeting the far end.
        let topo = m.stationed(StationSite::RxEnd);
        let mut targets = vec![Target {
            label: "reflector-0".into(),
            expected: m.clock.apparent_delay(2.0 * 40_000.0 * 5e-9),
            halfwidth: 1e-6,
        }];
        m.clamp_target_windows(&mut targets);
        let r = m.acquire(&topo, SwitchState::SW1_ONLY, &targets);
        match r {
            Err(Error::Measurement { section, .. }) => assert_eq!(section, "reflector-0"),
            other => panic!("expected a measurement failure, got {other:?}"),
        }
    }

    #[test]
    fn trace_dumps_are_collected_when_enabled() {
        let link = LinkTopology::chain(vec![Section::Fiber(FiberSpan::with_length_m(1_000.0))]);
        let mut m = Measurer::new(
            link,
            short_probe(),
            ClockModel::ideal(),
            AcquisitionConfig::default(),
            14,
        )
        .unwrap();
        m.collect_traces = true;
        m.measure_span(StationSite::RxEnd).unwrap();
        assert_eq!(m.trace_dumps.len(), 2);
        for dump in &m.trace_dumps {
            assert!(!dump.segment.is_empty());
            assert_eq!(dump.overlay.len() % 10, 1, "10x oversampled overlay");
            let seg_max = dump.segment.values().iter().cloned().fold(0.0f64, f64::max);
            assert!(seg_max > 0.0);
        }
    }
}
