//! Deterministic discrete-event simulation of vehicles, roadside units, base
//! stations and attackers.
//!
//! Time advances in fixed ticks. Each tick runs, in order: signal advance and
//! controller adjustments, the malfunction-management check, vehicle motion
//! (releases, car following, junction transfers, exits, parking), RSU
//! broadcasts, vehicle status reports and main-RSU congestion checks.
//! Spawns, incidents and attacks are separate timed events; events at equal
//! times run in scheduling order.

pub mod metrics;
pub mod mobility;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::adversary::{
    forged_payload, AdversaryConfig, BotnetMember, ForgeMode, ForgeTarget, Forger, JamRegion, ReplayAttacker,
    ReplayKind,
};
use crate::control::{alert_id, mmu_safe, ControlParams, Lbs, LbsAction, LbsTopology, LightState, ScheduleCommand};
use crate::detection::{CongestionAlert, DropReason, IngestOutcome, MainRsu, RoadAxis};
use crate::geometry::{
    angle_diff_deg, lane_from_position, Direction, LaneHit, LaneId, LaneRef, LightId, PathRecord, Point, SegmentEnd,
    SegmentId,
};
use crate::identity::{CaId, CertSubject, Certificate, CertificateAuthority, Hsm, PublicKey, SignedEnvelope, TrustAnchors};
use crate::protocol::{
    Locator, ProtocolTiming, RidOutcome, RidStateMsg, Routestate, RsuAgent, SegmentInfo,
    Variant, VehicleAgent, VehicleType,
};
use crate::scenario::{Arrivals, Layout, ParkConfig, Scenario, ScenarioError};
use crate::AgentId;

use metrics::*;
use mobility::{can_stop, next_speed, room_behind, safe_speed, Kinematics};

/// Interval between queue-length samples.
pub const QUEUE_SAMPLE_PERIOD: f64 = 10.0;

/// One line of `events.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub kind: &'static str,
    pub agent: String,
    pub subject: String,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub summary: Summary,
    pub events: Vec<EventRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    Honest,
    Replay(ReplayKind),
    Forged(ForgeMode),
    Flood,
    Botnet,
}

#[derive(Clone, Debug)]
enum MrsuInput {
    Status(SignedEnvelope),
    Exit(SignedEnvelope),
}

#[derive(Debug)]
enum Event {
    Tick(u64),
    Spawn(usize),
    IncidentStart(usize),
    IncidentEnd(usize),
    Replay { adv: usize, kind: ReplayKind, env: SignedEnvelope },
    Forge { adv: usize, k: u32 },
    Flood { adv: usize },
    BotnetStart { adv: usize },
    BotnetReport { adv: usize },
    MrsuProcess { mrsu: usize, input: MrsuInput, origin: Origin },
}

struct Scheduled {
    t: f64,
    seq: u64,
    ev: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed: the heap pops the earliest time, then the lowest sequence number.
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

struct SpawnPlan {
    route: Vec<LaneRef>,
    depart: f64,
    vtype: VehicleType,
    park: Option<ParkConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum VStatus {
    Queued,
    Driving,
    Parked,
    Done,
}

struct Vehicle {
    agent: VehicleAgent,
    route: Vec<LaneRef>,
    leg: usize,
    s: f64,
    v: f64,
    pos: Point,
    /// Start point and length of the junction connector while `s < 0`.
    conn: Option<(Point, f64)>,
    status: VStatus,
    depart: f64,
    finished: Option<f64>,
    /// Free-flow seconds of the distance covered so far.
    ff: f64,
    park: Option<ParkConfig>,
    parked_until: Option<f64>,
    has_parked: bool,
    visits: u32,
    accepted_leg: bool,
}

struct LaneState {
    len: f64,
    vmax: f64,
    light: Option<(usize, LightId)>,
    exit_rsu: usize,
    heading: f64,
    /// Vehicles on the lane (including its entry connector), front first.
    vehicles: Vec<usize>,
    source: VecDeque<usize>,
    incidents: Vec<usize>,
}

struct MrsuState {
    agent: MainRsu,
    busy_until: f64,
    budget: Option<f64>,
    from_lbs: Option<usize>,
    to_lbs: Option<usize>,
}

enum AdvState {
    Replay(ReplayAttacker),
    Forge {
        forger: Forger,
        captured: Certificate,
    },
    Flood {
        forger: Forger,
        end: f64,
        interval: f64,
    },
    Jam,
    Botnet {
        members: Vec<BotnetMember>,
        end: f64,
    },
}

struct IncidentState {
    rid: SegmentId,
    lid: LaneId,
    location: f64,
    start: f64,
    end: Option<f64>,
    first_alert: Option<f64>,
}

pub struct Simulation {
    sc: Scenario,
    layout: Layout,
    timing: ProtocolTiming,
    control: ControlParams,
    kin: Kinematics,
    dt: f64,
    ca: CertificateAuthority,
    anchors: TrustAnchors,
    key_rng: ChaCha20Rng,
    rsus: Vec<RsuAgent>,
    mrsus: Vec<MrsuState>,
    mrsu_by_id: BTreeMap<AgentId, usize>,
    mrsu_by_rid: BTreeMap<SegmentId, usize>,
    lbs: Vec<Lbs>,
    lbs_by_id: BTreeMap<AgentId, usize>,
    demand: Vec<BTreeMap<LightId, f64>>,
    lanes: BTreeMap<LaneRef, LaneState>,
    connectors: BTreeMap<(LaneRef, LaneRef), (Point, f64)>,
    vehicles: Vec<Vehicle>,
    spawns: Vec<SpawnPlan>,
    incidents: Vec<IncidentState>,
    advs: Vec<(AdversaryConfig, AdvState)>,
    jams: Vec<JamRegion>,
    next_agent: u32,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    alert_times: BTreeMap<u64, f64>,
    privacy: BTreeMap<PublicKey, BTreeSet<(usize, u32)>>,
    // Output.
    m: Summary,
    log: Vec<EventRecord>,
}

fn round_ticks(period: f64, dt: f64) -> u64 {
    ((period / dt).round() as u64).max(1)
}

impl Simulation {
    pub fn new(sc: &Scenario) -> Result<Self, ScenarioError> {
        sc.validate()?;
        let layout = sc.layout()?;
        let timing = sc.protocol_timing();
        let control = sc.control_params();
        let dparams = sc.detection.params();
        let mut master = ChaCha20Rng::seed_from_u64(sc.seed);
        let ca = CertificateAuthority::from_seed(CaId(1), master.next_u64());
        let anchors = ca.anchors(timing.freshness_window);
        let mut key_rng = ChaCha20Rng::seed_from_u64(master.next_u64());
        let mut flow_rng = ChaCha20Rng::seed_from_u64(master.next_u64());
        let net = &layout.net;
        let w = sc.lane_width;

        let mut rsus = Vec::new();
        for site in &layout.rsus {
            let seg = net.segment(site.rid).expect("layout segment");
            let hsm = Hsm::from_seed(key_rng.next_u64());
            ca.register_infrastructure(site.id, &hsm, 0.0)
                .expect("fresh RSU registers");
            let info = match sc.variant {
                Variant::S1 => SegmentInfo::Neighbors(seg.neighbor_table.clone()),
                Variant::S2 => SegmentInfo::Extent(seg.rpos.expect("derived extent")),
            };
            let msg = RidStateMsg {
                rid: site.rid,
                info,
                mrsu: seg.mrsu_id,
            };
            let gate = sc.timing.gated_broadcast.then_some(timing.broadcast_window);
            rsus.push(RsuAgent::new(site.id, site.pos, site.range, hsm, msg, gate));
        }

        let lbs_by_id: BTreeMap<AgentId, usize> =
            layout.lbs.iter().enumerate().map(|(i, l)| (l.id, i)).collect();
        let lbs_of_node = |node: &crate::geometry::NodeId| layout.lbs.iter().position(|l| &l.node == node);

        let mut mrsus = Vec::new();
        let mut mrsu_by_id = BTreeMap::new();
        let mut mrsu_by_rid = BTreeMap::new();
        for site in &layout.mrsus {
            let seg = net.segment(site.rid).expect("layout segment");
            let hsm = Hsm::from_seed(key_rng.next_u64());
            ca.register_infrastructure(site.id, &hsm, 0.0)
                .expect("fresh main RSU registers");
            let agent = MainRsu::new(
                site.id,
                site.rid,
                sc.variant,
                site.pos,
                site.range,
                dparams,
                RoadAxis {
                    origin: seg.start,
                    direction: seg.axis(),
                },
                hsm,
                anchors.clone(),
                seg.rsu_ids.iter().copied().collect(),
            );
            mrsu_by_id.insert(site.id, mrsus.len());
            mrsu_by_rid.insert(site.rid, mrsus.len());
            mrsus.push(MrsuState {
                agent,
                busy_until: 0.0,
                budget: sc.detection.verify_budget,
                from_lbs: lbs_of_node(&seg.from_node),
                to_lbs: lbs_of_node(&seg.to_node),
            });
        }

        let mut lbs = Vec::new();
        for site in &layout.lbs {
            lbs.push(Lbs::new(
                site.id,
                site.node.clone(),
                site.controller,
                site.plan.clone(),
                site.conflicts.clone(),
                control,
                anchors.clone(),
                LbsTopology::build(net, &site.node),
                net.lbs_neighbors(site.id),
            ));
        }

        let mut lanes = BTreeMap::new();
        for seg in &net.segments {
            for lane in &seg.lanes {
                let lr = (seg.rid, lane.lid);
                let exit_node = net.lane_exit_node(lr).expect("lane");
                let ix = net.intersection(exit_node);
                let light = ix.and_then(|ix| {
                    let l = ix.light_for(lr)?;
                    Some((lbs_by_id[&ix.lbs], l.clone()))
                });
                let exit_end = match lane.direction {
                    Direction::Right => SegmentEnd::End,
                    Direction::Left => SegmentEnd::Start,
                };
                let exit_rsu = layout
                    .rsus
                    .iter()
                    .position(|r| r.rid == seg.rid && r.end == exit_end)
                    .expect("end RSU");
                lanes.insert(
                    lr,
                    LaneState {
                        len: lane.length_m,
                        vmax: lane.avg_speed_limit,
                        light,
                        exit_rsu,
                        heading: seg.lane_heading_deg(lane.lid).expect("lane"),
                        vehicles: Vec::new(),
                        source: VecDeque::new(),
                        incidents: Vec::new(),
                    },
                );
            }
        }
        let mut connectors = BTreeMap::new();
        for (a, b) in net.connections() {
            let sa = net.segment(a.0).expect("segment");
            let sb = net.segment(b.0).expect("segment");
            let from = sa.lane_point(a.1, sa.lane(a.1).expect("lane").length_m, w).expect("lane");
            let to = sb.lane_point(b.1, 0.0, w).expect("lane");
            connectors.insert((a, b), (from, from.dist(to)));
        }

        let mut spawns = Vec::new();
        for f in &sc.flows {
            let route: Vec<LaneRef> = f.route.iter().map(|&[r, l]| (SegmentId(r), LaneId(l))).collect();
            let mut t = f.start;
            let mut n = 0u32;
            if f.arrival == Arrivals::Poisson {
                t += -f.headway * (1.0 - flow_rng.gen::<f64>()).ln();
            }
            while t <= f.end && t <= sc.horizon && f.count.map_or(true, |c| n < c) {
                spawns.push(SpawnPlan {
                    route: route.clone(),
                    depart: t,
                    vtype: f.vtype,
                    park: None,
                });
                n += 1;
                t += match f.arrival {
                    Arrivals::Uniform => f.headway,
                    Arrivals::Poisson => -f.headway * (1.0 - flow_rng.gen::<f64>()).ln(),
                };
            }
        }
        for v in &sc.vehicles {
            if v.depart <= sc.horizon {
                spawns.push(SpawnPlan {
                    route: v.route.iter().map(|&[r, l]| (SegmentId(r), LaneId(l))).collect(),
                    depart: v.depart,
                    vtype: v.vtype,
                    park: v.park.clone(),
                });
            }
        }
        spawns.sort_by(|a, b| a.depart.total_cmp(&b.depart));

        let incidents = sc
            .incidents
            .iter()
            .map(|i| IncidentState {
                rid: SegmentId(i.rid),
                lid: LaneId(i.lid),
                location: i.location,
                start: i.start,
                end: i.duration.map(|d| i.start + d),
                first_alert: None,
            })
            .collect();

        let mut next_agent = layout.next_agent;
        let mut advs = Vec::new();
        let mut jams = Vec::new();
        for a in &sc.adversaries {
            next_agent += 1;
            let seed = key_rng.next_u64();
            let state = match a {
                AdversaryConfig::Replay {
                    rid,
                    start,
                    stale,
                    fast,
                    stale_delay,
                    fast_delay,
                } => AdvState::Replay(ReplayAttacker::new(
                    SegmentId(*rid),
                    *start,
                    *stale,
                    *fast,
                    stale_delay.unwrap_or(timing.freshness_window + 1.0),
                    *fast_delay,
                )),
                AdversaryConfig::Forge { rid, .. } => {
                    // Any certificate heard on air will do; take the entry RSU's.
                    let seg = net.segment(SegmentId(*rid)).expect("validated segment");
                    let idx = layout.rsus.iter().position(|r| r.id == seg.rsu_ids[0]).expect("RSU");
                    let captured = rsus[idx]
                        .broadcast_tick(0.0)
                        .map(|e| e.certificate)
                        .unwrap_or_else(|| {
                            rsus[idx].exit_signal(PublicKey([0; 32]), 0.0).certificate
                        });
                    AdvState::Forge {
                        forger: Forger::from_seed(seed),
                        captured,
                    }
                }
                AdversaryConfig::DosFlood { start, duration, rate, .. } => AdvState::Flood {
                    forger: Forger::from_seed(seed),
                    end: start + duration,
                    interval: 1.0 / rate,
                },
                AdversaryConfig::Jam {
                    center,
                    target_rid,
                    radius,
                    start,
                    duration,
                } => {
                    let c = match (center, target_rid) {
                        (Some([x, y]), _) => Point::new(*x, *y),
                        (None, Some(r)) => layout.mrsu_of(SegmentId(*r)).expect("validated segment").pos,
                        (None, None) => unreachable!("validated jam center"),
                    };
                    jams.push(JamRegion {
                        center: c,
                        radius: *radius,
                        start: *start,
                        end: start + duration,
                    });
                    AdvState::Jam
                }
                AdversaryConfig::Botnet { start, duration, .. } => AdvState::Botnet {
                    members: Vec::new(),
                    end: start + duration,
                },
            };
            advs.push((a.clone(), state));
        }

        let m = Summary {
            scenario: sc.name.clone(),
            config_hash: String::new(),
            seed: sc.seed,
            variant: sc.variant,
            controller: sc.controller,
            horizon: sc.horizon,
            vehicles: VehicleCounts::default(),
            delay: DelayStats::default(),
            queue: QueueStats::default(),
            messages: MessageCounts::default(),
            drops: DropCounts::default(),
            true_alerts: 0,
            false_alerts: 0,
            alerts: Vec::new(),
            incidents: Vec::new(),
            commands: Vec::new(),
            safety: Safety::default(),
            adversary: AdversaryCounts::default(),
            privacy: Privacy::default(),
            diagnostics: Diagnostics::default(),
        };

        let demand = vec![BTreeMap::new(); lbs.len()];
        Ok(Self {
            sc: sc.clone(),
            timing,
            control,
            kin: Kinematics::from(&sc.vehicle),
            dt: sc.timing.tick,
            ca,
            anchors,
            key_rng,
            rsus,
            mrsus,
            mrsu_by_id,
            mrsu_by_rid,
            lbs,
            lbs_by_id,
            demand,
            lanes,
            connectors,
            vehicles: Vec::new(),
            spawns,
            incidents,
            advs,
            jams,
            next_agent,
            queue: BinaryHeap::new(),
            seq: 0,
            alert_times: BTreeMap::new(),
            privacy: BTreeMap::new(),
            layout,
            m,
            log: Vec::new(),
        })
    }

    fn schedule(&mut self, t: f64, ev: Event) {
        self.seq += 1;
        self.queue.push(Scheduled { t, seq: self.seq, ev });
    }

    fn event(&mut self, time: f64, kind: &'static str, agent: impl ToString, subject: impl ToString, detail: impl ToString) {
        self.log.push(EventRecord {
            time,
            kind,
            agent: agent.to_string(),
            subject: subject.to_string(),
            detail: detail.to_string(),
        });
    }

    fn jammed(&mut self, p: Point, t: f64) -> bool {
        if self.jams.iter().any(|j| j.covers(p, t)) {
            self.m.adversary.jam_suppressed += 1;
            true
        } else {
            false
        }
    }

    /// Runs to the horizon and returns the summary and event log.
    pub fn run(mut self, config_hash: String) -> SimOutput {
        self.m.config_hash = config_hash;
        for i in 0..self.spawns.len() {
            let t = self.spawns[i].depart;
            self.schedule(t, Event::Spawn(i));
        }
        for i in 0..self.incidents.len() {
            let (s, e) = (self.incidents[i].start, self.incidents[i].end);
            self.schedule(s, Event::IncidentStart(i));
            if let Some(e) = e {
                self.schedule(e, Event::IncidentEnd(i));
            }
        }
        for i in 0..self.advs.len() {
            let start = self.advs[i].0.start();
            match self.advs[i].0.clone() {
                AdversaryConfig::Forge { count, rate, .. } => {
                    for k in 0..count {
                        self.schedule(start + k as f64 / rate, Event::Forge { adv: i, k });
                    }
                }
                AdversaryConfig::DosFlood { .. } => self.schedule(start, Event::Flood { adv: i }),
                AdversaryConfig::Botnet { .. } => self.schedule(start, Event::BotnetStart { adv: i }),
                AdversaryConfig::Jam { .. } => {
                    let j = self.jams.iter().find(|j| j.start == start).copied();
                    if let Some(j) = j {
                        self.event(j.start, "jam", format!("X{i}"), "", format!("radius={:.3} until={:.3}", j.radius, j.end));
                    }
                }
                AdversaryConfig::Replay { .. } => {}
            }
        }
        for i in 0..self.lbs.len() {
            let c = self.lbs[i].signal.plan().cycle_length();
            self.m.safety.check_cycle(c, self.control.min_cycle, self.control.max_cycle);
        }
        self.schedule(0.0, Event::Tick(0));

        while let Some(Scheduled { t, ev, .. }) = self.queue.pop() {
            if t > self.sc.horizon + 1e-9 {
                break;
            }
            match ev {
                Event::Tick(k) => {
                    self.tick(k, t);
                    let next = (k + 1) as f64 * self.dt;
                    if next <= self.sc.horizon + 1e-9 {
                        self.schedule(next, Event::Tick(k + 1));
                    }
                }
                Event::Spawn(i) => self.spawn(i, t),
                Event::IncidentStart(i) => {
                    let inc = &self.incidents[i];
                    let lr = (inc.rid, inc.lid);
                    let detail = format!("location={:.3}", inc.location);
                    self.lanes.get_mut(&lr).expect("validated lane").incidents.push(i);
                    self.event(t, "incident_start", "", format!("{}:{}", lr.0 .0, lr.1 .0), detail);
                }
                Event::IncidentEnd(i) => {
                    let inc = &self.incidents[i];
                    let lr = (inc.rid, inc.lid);
                    self.lanes.get_mut(&lr).expect("validated lane").incidents.retain(|&x| x != i);
                    self.event(t, "incident_end", "", format!("{}:{}", lr.0 .0, lr.1 .0), "");
                }
                Event::Replay { adv, kind, env } => {
                    match kind {
                        ReplayKind::Stale => self.m.adversary.replay.stale_sent += 1,
                        ReplayKind::Fast => self.m.adversary.replay.fast_sent += 1,
                    }
                    let AdvState::Replay(r) = &self.advs[adv].1 else { unreachable!() };
                    let idx = self.mrsu_by_rid[&r.rid];
                    self.deliver_mrsu(idx, MrsuInput::Status(env), Origin::Replay(kind), t);
                }
                Event::Forge { adv, k } => self.forge(adv, k, t),
                Event::Flood { adv } => self.flood(adv, t),
                Event::BotnetStart { adv } => self.botnet_start(adv, t),
                Event::BotnetReport { adv } => self.botnet_report(adv, t),
                Event::MrsuProcess { mrsu, input, origin } => self.process_mrsu(mrsu, input, origin, t),
            }
        }
        self.finish()
    }

    fn spawn(&mut self, i: usize, now: f64) {
        let plan = &self.spawns[i];
        let route = plan.route.clone();
        let (vtype, park, depart) = (plan.vtype, plan.park.clone(), plan.depart);
        let id = AgentId(self.next_agent);
        self.next_agent += 1;
        let hsm = Hsm::from_seed(self.key_rng.next_u64());
        let heading = self.lanes[&route[0]].heading;
        let agent = VehicleAgent::new(
            id,
            format!("VE-{}", self.vehicles.len()),
            self.sc.variant,
            vtype,
            &self.ca,
            hsm,
            self.sc.vehicle.pseudonym_batch,
            (SegmentId::EXTERNAL, LaneId(0)),
            heading,
            now,
        )
        .expect("fresh vehicle registers");
        let pos = self.lane_point(route[0], 0.0);
        let vi = self.vehicles.len();
        self.vehicles.push(Vehicle {
            agent,
            route: route.clone(),
            leg: 0,
            s: 0.0,
            v: 0.0,
            pos,
            conn: None,
            status: VStatus::Queued,
            depart,
            finished: None,
            ff: 0.0,
            park,
            parked_until: None,
            has_parked: false,
            visits: 0,
            accepted_leg: false,
        });
        self.lanes.get_mut(&route[0]).expect("validated lane").source.push_back(vi);
        self.m.vehicles.spawned += 1;
        self.event(now, "spawn", id, format!("{}:{}", route[0].0 .0, route[0].1 .0), format!("vtype={vtype:?}"));
    }

    fn lane_point(&self, lr: LaneRef, s: f64) -> Point {
        self.layout
            .net
            .segment(lr.0)
            .and_then(|seg| seg.lane_point(lr.1, s, self.sc.lane_width))
            .expect("lane exists")
    }

    fn world_pos(&self, vi: usize) -> Point {
        let v = &self.vehicles[vi];
        let lr = v.route[v.leg];
        match v.conn {
            Some((from, c)) if v.s < 0.0 && c > 0.0 => {
                let b0 = self.lane_point(lr, 0.0);
                let k = (-v.s / c).min(1.0);
                Point::new(b0.x + (from.x - b0.x) * k, b0.y + (from.y - b0.y) * k)
            }
            _ => self.lane_point(lr, v.s.max(0.0)),
        }
    }

    fn light_state(&self, lane: &LaneState, now: f64) -> Option<LightState> {
        let (li, light) = lane.light.as_ref()?;
        self.lbs[*li].signal.states(now).get(light).copied()
    }

    fn tick(&mut self, k: u64, now: f64) {
        self.control_tick(now);
        self.mobility(now);
        if k % round_ticks(self.timing.broadcast_period, self.dt) == 0 {
            self.broadcasts(now);
        }
        self.status_reports(now);
        if k % round_ticks(self.sc.timing.check_period, self.dt) == 0 && self.sc.detection.enabled {
            self.congestion_checks(now);
        }
        if k % round_ticks(QUEUE_SAMPLE_PERIOD, self.dt) == 0 {
            let eta = self.sc.detection.speed_threshold;
            let mut n = 0u64;
            for lane in self.lanes.values() {
                n += lane.source.len() as u64;
                n += lane
                    .vehicles
                    .iter()
                    .filter(|&&vi| self.vehicles[vi].v < eta)
                    .count() as u64;
            }
            self.m.queue.max = self.m.queue.max.max(n);
            self.m.queue.series.push((now, n));
        }
    }

    fn control_tick(&mut self, now: f64) {
        for i in 0..self.lbs.len() {
            let demand = self.demand[i].clone();
            let (changes, cmds) = self.lbs[i].tick(now, || demand);
            for c in &changes {
                self.m.safety.phase_changes += 1;
                if c.plan_changed {
                    let cycle = self.lbs[i].signal.plan().cycle_length();
                    self.m.safety.check_cycle(cycle, self.control.min_cycle, self.control.max_cycle);
                }
                if c.new_cycle {
                    self.demand[i].clear();
                }
            }
            for cmd in cmds {
                self.record_command(cmd, None);
            }
            let states = self.lbs[i].signal.states(now);
            self.m.safety.mmu_checks += 1;
            if !mmu_safe(&states, self.lbs[i].conflicts()) {
                self.m.safety.mmu_violations += 1;
                let id = self.lbs[i].id;
                self.event(now, "mmu_violation", id, "", "");
            }
        }
    }

    fn record_command(&mut self, cmd: ScheduleCommand, boundary_after_alert: Option<f64>) {
        self.m.messages.commands += 1;
        self.m
            .safety
            .check_delta(cmd.delta, self.control.min_step, self.control.max_step);
        let alert_time = cmd.cause.and_then(|c| self.alert_times.get(&c).copied());
        self.event(
            cmd.issued_at,
            "command",
            cmd.lbs,
            &cmd.intersection,
            format!(
                "kind={:?} delta={:.3} from={:?} to={:?} effective_from={:.3}",
                cmd.kind, cmd.delta, cmd.from_phase, cmd.to_phase, cmd.effective_from
            ),
        );
        self.m.commands.push(CommandRecord {
            time: cmd.issued_at,
            lbs: cmd.lbs.0,
            intersection: cmd.intersection.0.clone(),
            kind: cmd.kind,
            delta: cmd.delta,
            from_phase: cmd.from_phase,
            to_phase: cmd.to_phase,
            effective_from: cmd.effective_from,
            cause_rid: cmd.cause_rid.map(|r| r.0),
            alert_time,
            boundary_after_alert: if cmd.cause.is_some() { boundary_after_alert } else { None },
        });
    }

    fn mobility(&mut self, now: f64) {
        let dt = self.dt;
        let k = self.kin;
        let keys: Vec<LaneRef> = self.lanes.keys().copied().collect();

        // Parked vehicles rejoin where there is room.
        for vi in 0..self.vehicles.len() {
            let v = &self.vehicles[vi];
            if v.status != VStatus::Parked || v.parked_until.map_or(true, |u| now < u) {
                continue;
            }
            let lr = v.route[v.leg];
            let at = v.s;
            let lane = &self.lanes[&lr];
            let leader_ok = lane
                .vehicles
                .iter()
                .filter(|&&o| self.vehicles[o].s >= at)
                .all(|&o| self.vehicles[o].s - k.length - k.standstill_gap >= at);
            let follower_ok = lane
                .vehicles
                .iter()
                .filter(|&&o| self.vehicles[o].s < at)
                .all(|&o| at - k.length - k.standstill_gap >= self.vehicles[o].s);
            if leader_ok && follower_ok {
                let veh = &mut self.vehicles[vi];
                veh.status = VStatus::Driving;
                veh.parked_until = None;
                if veh.agent.routestate() == Routestate::Parking {
                    veh.agent.unpark(now, &self.timing);
                }
                let id = veh.agent.id;
                self.insert_sorted(lr, vi);
                self.event(now, "unpark", id, format!("{}:{}", lr.0 .0, lr.1 .0), format!("s={at:.3}"));
            }
        }

        // Source queues release onto the first lane.
        for lr in &keys {
            let Some(&vi) = self.lanes[lr].source.front() else { continue };
            let lane = &self.lanes[lr];
            let room = lane
                .vehicles
                .last()
                .map(|&t| self.vehicles[t].s - k.length - k.standstill_gap);
            if room.map_or(true, |r| r >= 0.0) {
                let vmax = lane.vmax;
                let v0 = room.map_or(vmax, |r| vmax.min(safe_speed(r, k.decel, dt + k.reaction)));
                self.lanes.get_mut(lr).expect("lane").source.pop_front();
                let veh = &mut self.vehicles[vi];
                veh.status = VStatus::Driving;
                veh.s = 0.0;
                veh.v = v0;
                let id = veh.agent.id;
                self.lanes.get_mut(lr).expect("lane").vehicles.push(vi);
                self.m.vehicles.entered += 1;
                self.event(now, "enter", id, format!("{}:{}", lr.0 .0, lr.1 .0), "");
            }
        }

        // Car following, front to back on every lane.
        let mut old_pos: BTreeMap<usize, Point> = BTreeMap::new();
        let mut crossed: Vec<usize> = Vec::new();
        for lr in &keys {
            let lane = &self.lanes[lr];
            let list = lane.vehicles.clone();
            let len = lane.len;
            let vmax = lane.vmax;
            let light = self.light_state(lane, now);
            let incident_locs: Vec<f64> = lane.incidents.iter().map(|&i| self.incidents[i].location).collect();
            for (i, &vi) in list.iter().enumerate() {
                let veh = &self.vehicles[vi];
                let (s, v) = (veh.s, veh.v);
                let mut room: Option<f64> = None;
                let mut limit = |r: f64| room = Some(room.map_or(r, |x: f64| x.min(r)));
                let leader = (i > 0).then(|| list[i - 1]);
                if let Some(l) = leader {
                    let lv = &self.vehicles[l];
                    limit(room_behind(lv.s - k.length - k.standstill_gap - s, lv.v, k.decel));
                }
                let facing_line = s <= len && leader.map_or(true, |l| self.vehicles[l].s > len);
                if facing_line {
                    let d_stop = len - s;
                    let mut stop = match light {
                        Some(LightState::Red) => true,
                        Some(LightState::Yellow) => can_stop(d_stop, v, k.decel),
                        _ => false,
                    };
                    if let Some(&next) = veh.route.get(veh.leg + 1) {
                        if leader.is_none() {
                            if let Some(&tail) = self.lanes[&next].vehicles.last() {
                                let c = self.connectors.get(&(*lr, next)).map_or(0.0, |x| x.1);
                                let (tail_s, tail_v) = (self.vehicles[tail].s, self.vehicles[tail].v);
                                limit(room_behind(len + c + tail_s - k.length - k.standstill_gap - s, tail_v, k.decel));
                                // Keep the junction clear when the next lane is backed up to its entry.
                                let full = tail_v < 1.0 && tail_s - k.length - k.standstill_gap < 0.0;
                                if full && can_stop(d_stop, v, k.decel) {
                                    stop = true;
                                }
                            }
                        }
                    }
                    if stop {
                        limit(d_stop);
                    }
                }
                for &loc in &incident_locs {
                    if s < loc {
                        limit(loc - k.standstill_gap - s);
                    }
                }
                let v_new = next_speed(v, vmax, room, &k, dt);
                old_pos.insert(vi, veh.pos);
                let veh = &mut self.vehicles[vi];
                veh.v = v_new;
                veh.s = s + v_new * dt;
                if veh.s > len {
                    crossed.push(vi);
                }
            }
        }

        // Junction transfers, exits and route ends.
        for &vi in &crossed {
            let lr = self.vehicles[vi].route[self.vehicles[vi].leg];
            let (len, vmax_a, light, exit_rsu) = {
                let l = &self.lanes[&lr];
                (l.len, l.vmax, l.light.clone(), l.exit_rsu)
            };
            self.lanes.get_mut(&lr).expect("lane").vehicles.retain(|&x| x != vi);
            if let Some((li, light)) = light {
                *self.demand[li].entry(light).or_default() += 1.0;
            }
            let stop_point = self.lane_point(lr, len);
            let overflow = self.vehicles[vi].s - len;
            let prev_s = self.vehicles[vi].s - self.vehicles[vi].v * dt;
            self.vehicles[vi].ff += (len - prev_s).max(0.0) / vmax_a;
            self.feed_path(vi, old_pos[&vi], stop_point);
            self.exit_lane(vi, lr, exit_rsu, stop_point, now);
            let veh = &mut self.vehicles[vi];
            let keep = veh.agent.path.origin_ref;
            veh.agent.path.reset(keep);
            let next = veh.route.get(veh.leg + 1).copied();
            match next {
                None => {
                    veh.status = VStatus::Done;
                    veh.finished = Some(now);
                    veh.pos = stop_point;
                    let id = veh.agent.id;
                    self.m.vehicles.finished += 1;
                    self.event(now, "finish", id, "", "");
                }
                Some(nl) => {
                    let (from, c) = self.connectors[&(lr, nl)];
                    let veh = &mut self.vehicles[vi];
                    veh.leg += 1;
                    veh.accepted_leg = false;
                    veh.s = overflow - c;
                    veh.conn = Some((from, c));
                    veh.ff += overflow / self.lanes[&nl].vmax;
                    old_pos.insert(vi, stop_point);
                    self.insert_sorted(nl, vi);
                }
            }
        }

        // Positions, dead reckoning and protocol bookkeeping.
        let moved: Vec<usize> = old_pos.keys().copied().collect();
        let crossed: BTreeSet<usize> = crossed.into_iter().collect();
        for vi in moved {
            if self.vehicles[vi].status != VStatus::Driving {
                continue;
            }
            let lr = self.vehicles[vi].route[self.vehicles[vi].leg];
            let new_pos = self.world_pos(vi);
            let from = old_pos[&vi];
            let veh = &self.vehicles[vi];
            if !crossed.contains(&vi) {
                let d = veh.v * dt;
                self.vehicles[vi].ff += d / self.lanes[&lr].vmax;
            }
            let veh = &self.vehicles[vi];
            let b0 = self.lane_point(lr, 0.0);
            let prev_s = if crossed.contains(&vi) {
                veh.conn.map_or(0.0, |c| -c.1)
            } else {
                veh.s - veh.v * dt
            };
            if prev_s < 0.0 && veh.s >= 0.0 {
                self.feed_path(vi, from, b0);
                self.feed_path(vi, b0, new_pos);
            } else {
                self.feed_path(vi, from, new_pos);
            }
            let len = self.lanes[&lr].len;
            let veh = &mut self.vehicles[vi];
            veh.pos = new_pos;
            if veh.s >= 0.0 {
                veh.conn = None;
            }
            veh.agent.pos = new_pos;
            let speed = veh.v;
            veh.agent.update_motion(speed, dt, len);

            // Parking spot reached.
            let park_here = veh
                .park
                .as_ref()
                .is_some_and(|p| !veh.has_parked && p.leg == veh.leg && veh.s >= p.at);
            if park_here {
                let p = veh.park.clone().expect("checked");
                veh.has_parked = true;
                veh.status = VStatus::Parked;
                veh.parked_until = Some(now + p.duration);
                veh.v = 0.0;
                veh.agent.speed = 0.0;
                if veh.agent.routestate() == Routestate::Onroad {
                    veh.agent.park(now);
                }
                let id = veh.agent.id;
                self.lanes.get_mut(&lr).expect("lane").vehicles.retain(|&x| x != vi);
                self.event(now, "park", id, format!("{}:{}", lr.0 .0, lr.1 .0), format!("until={:.3}", now + p.duration));
            }
        }
    }

    fn insert_sorted(&mut self, lr: LaneRef, vi: usize) {
        let vehicles = &self.vehicles;
        let list = &mut self.lanes.get_mut(&lr).expect("lane").vehicles;
        let s = vehicles[vi].s;
        let at = list
            .iter()
            .position(|&o| vehicles[o].s < s || (vehicles[o].s == s && o > vi))
            .unwrap_or(list.len());
        list.insert(at, vi);
    }

    /// Dead-reckons the straight move `from -> to`: a turn in place, then a
    /// straight run, so the recorded path follows the world trajectory.
    fn feed_path(&mut self, vi: usize, from: Point, to: Point) {
        const H: f64 = 0.25;
        let gain = self.sc.vehicle.steering_gain;
        let path: &mut PathRecord = &mut self.vehicles[vi].agent.path;
        let d = to.sub(from);
        let len = d.norm();
        if len < 1e-9 {
            return;
        }
        let target = d.y.atan2(d.x).to_degrees();
        let turn = angle_diff_deg(path.heading_deg, target);
        if turn.abs() > 1e-9 {
            path.record_step(turn / (gain * H), 0.0, H, gain);
        }
        path.record_step(0.0, len / H, H, gain);
    }

    fn exit_lane(&mut self, vi: usize, lr: LaneRef, exit_rsu: usize, at: Point, now: f64) {
        let routestate = self.vehicles[vi].agent.routestate();
        let id = self.vehicles[vi].agent.id;
        if routestate == Routestate::Idle {
            self.m.diagnostics.missed_segments += 1;
            self.event(now, "missed_segment", id, lr.0 .0, "");
            return;
        }
        if routestate != Routestate::Onroad {
            return;
        }
        let pseudonym = self.vehicles[vi].agent.active_pseudonym().expect("onroad vehicle has a pseudonym");
        self.vehicles[vi].agent.exit_segment();
        self.event(now, "exit", id, lr.0 .0, format!("pseudonym={}", pseudonym.short()));
        let rsu_pos = self.rsus[exit_rsu].pos;
        if at.dist(rsu_pos) > self.rsus[exit_rsu].range || self.jammed(at, now) {
            return;
        }
        let env = self.rsus[exit_rsu].exit_signal(pseudonym, now);
        let idx = self.mrsu_by_rid[&lr.0];
        self.deliver_mrsu(idx, MrsuInput::Exit(env), Origin::Honest, now);
    }

    fn broadcasts(&mut self, now: f64) {
        for ri in 0..self.rsus.len() {
            let (pos, range) = (self.rsus[ri].pos, self.rsus[ri].range);
            if self.sc.timing.gated_broadcast {
                let arrived = self
                    .vehicles
                    .iter()
                    .any(|v| v.status == VStatus::Driving && v.pos.dist(pos) <= range);
                if arrived {
                    self.rsus[ri].notify_arrival(now);
                }
            }
            let listeners: Vec<usize> = (0..self.vehicles.len())
                .filter(|&vi| {
                    let v = &self.vehicles[vi];
                    v.status == VStatus::Driving && v.agent.routestate() == Routestate::Idle && v.pos.dist(pos) <= range
                })
                .collect();
            // Nobody can hear it; skip the signature.
            if listeners.is_empty() {
                continue;
            }
            let Some(env) = self.rsus[ri].broadcast_tick(now) else { continue };
            self.m.messages.rid_broadcasts += 1;
            let rid = self.rsus[ri].rid;
            for vi in listeners {
                let p = self.vehicles[vi].pos;
                if self.jammed(p, now) {
                    continue;
                }
                self.m.messages.rid_receptions += 1;
                let outcome = {
                    let v = &mut self.vehicles[vi];
                    v.agent.handle_rid_state(&env, &self.anchors, &self.ca, &self.timing, now)
                };
                match outcome {
                    RidOutcome::Accepted { rid: got, lid, pseudonym } => {
                        let v = &mut self.vehicles[vi];
                        v.visits += 1;
                        v.accepted_leg = true;
                        let actual = v.route[v.leg];
                        let id = v.agent.id;
                        if got != actual.0 || lid.is_some_and(|l| l != actual.1) {
                            self.m.diagnostics.lane_misclassified += 1;
                        }
                        self.m.messages.segment_acceptances += 1;
                        self.m.privacy.segment_visits += 1;
                        self.event(
                            now,
                            "accept",
                            id,
                            rid.0,
                            format!("lane={} pseudonym={}", lid.map_or(0, |l| l.0), pseudonym.short()),
                        );
                    }
                    RidOutcome::Ignored(r) => DropCounts::bump(&mut self.m.drops.vehicle, r),
                }
            }
        }
    }

    fn status_reports(&mut self, now: f64) {
        for vi in 0..self.vehicles.len() {
            let st = self.vehicles[vi].status;
            if st != VStatus::Driving && st != VStatus::Parked {
                continue;
            }
            let Some(env) = self.vehicles[vi].agent.status_tick(now, &self.timing) else { continue };
            self.m.messages.status_sent += 1;
            let visit = self.vehicles[vi].visits;
            self.privacy.entry(env.signer()).or_default().insert((vi, visit));
            let rid = self.vehicles[vi].agent.rid();
            for a in 0..self.advs.len() {
                if let AdvState::Replay(r) = &mut self.advs[a].1 {
                    if Some(r.rid) == rid {
                        if let Some((t, kind, cap)) = r.on_capture(&env, now) {
                            self.m.adversary.replay.captured += 1;
                            self.schedule(t, Event::Replay { adv: a, kind, env: cap.envelope });
                        }
                    }
                }
            }
            let Some(mid) = self.vehicles[vi].agent.mrsu() else { continue };
            let Some(&idx) = self.mrsu_by_id.get(&mid) else { continue };
            let (mpos, mrange) = (self.mrsus[idx].agent.pos, self.mrsus[idx].agent.range);
            if self.vehicles[vi].pos.dist(mpos) > mrange {
                DropCounts::bump(&mut self.m.drops.mrsu, "OutOfRange");
                continue;
            }
            if self.jammed(mpos, now) {
                continue;
            }
            self.deliver_mrsu(idx, MrsuInput::Status(env), Origin::Honest, now);
        }
    }

    fn deliver_mrsu(&mut self, idx: usize, input: MrsuInput, origin: Origin, now: f64) {
        match self.mrsus[idx].budget {
            Some(b) => {
                let t = self.mrsus[idx].busy_until.max(now) + 1.0 / b;
                self.mrsus[idx].busy_until = t;
                self.schedule(t, Event::MrsuProcess { mrsu: idx, input, origin });
            }
            None => self.process_mrsu(idx, input, origin, now),
        }
    }

    fn process_mrsu(&mut self, idx: usize, input: MrsuInput, origin: Origin, now: f64) {
        let result: Result<(), DropReason> = match &input {
            MrsuInput::Status(env) => match self.mrsus[idx].agent.ingest(env, now) {
                IngestOutcome::CacheUpdated | IngestOutcome::Purged => Ok(()),
                IngestOutcome::Dropped(r) => Err(r),
            },
            MrsuInput::Exit(env) => self.mrsus[idx].agent.purge_on_exit(env, now).map(|_| ()),
        };
        let m = &mut self.m;
        match origin {
            Origin::Honest => match (&input, result) {
                (MrsuInput::Status(_), Ok(())) => m.messages.status_delivered += 1,
                (MrsuInput::Exit(_), Ok(())) => m.messages.exit_signals += 1,
                (_, Err(r)) => {
                    if r == DropReason::StaleTimestamp && self.mrsus[idx].budget.is_some() {
                        m.adversary.flood.honest_stale += 1;
                    }
                    DropCounts::bump(&mut m.drops.mrsu, r);
                }
            },
            Origin::Replay(kind) => {
                let r = &mut m.adversary.replay;
                match result {
                    Ok(()) => r.accepted += 1,
                    Err(DropReason::StaleTimestamp) => r.stale_timestamp += 1,
                    Err(DropReason::Duplicate) => r.duplicate += 1,
                    Err(_) => r.other += 1,
                }
                let t = match kind {
                    ReplayKind::Stale => "stale",
                    ReplayKind::Fast => "fast",
                };
                let id = self.mrsus[idx].agent.id;
                self.event(now, "replay", id, t, format!("{result:?}"));
            }
            Origin::Forged(mode) => self.forge_outcome(mode, result.err().map(|r| format!("{r:?}")), now, idx),
            Origin::Flood => match result {
                Ok(()) => m.adversary.flood.accepted += 1,
                Err(_) => m.adversary.flood.rejected += 1,
            },
            Origin::Botnet => {
                if result.is_ok() {
                    m.adversary.botnet.accepted += 1;
                }
            }
        }
    }

    fn forge_outcome(&mut self, mode: ForgeMode, err: Option<String>, now: f64, target: usize) {
        let f = &mut self.m.adversary.forge;
        let expected = match mode {
            ForgeMode::Uncertified => "CertError",
            ForgeMode::Mismatch => "SignatureError",
        };
        match err.as_deref() {
            None => f.accepted += 1,
            Some("CertError") => f.cert_error += 1,
            Some("SignatureError") => f.signature_error += 1,
            Some(_) => {}
        }
        if err.as_deref().is_some_and(|e| e != expected) {
            f.misattributed += 1;
        }
        self.event(now, "forge", format!("T{target}"), format!("{mode:?}"), err.unwrap_or_else(|| "accepted".into()));
    }

    fn congestion_checks(&mut self, now: f64) {
        for idx in 0..self.mrsus.len() {
            let alerts = self.mrsus[idx].agent.check(now);
            for (alert, env) in alerts {
                self.on_alert(idx, &alert, env, now);
            }
        }
    }

    fn resolve_alert_lane(&self, alert: &CongestionAlert) -> Option<LaneId> {
        if alert.lane.is_some() {
            return alert.lane;
        }
        let seg = self.layout.net.segment(alert.rid)?;
        let mut votes: BTreeMap<LaneId, usize> = BTreeMap::new();
        for p in &alert.positions {
            if let Ok(LaneHit::Lane(l)) = lane_from_position(*p, seg) {
                *votes.entry(l).or_default() += 1;
            }
        }
        let best = votes.values().copied().max()?;
        votes.into_iter().find(|&(_, v)| v == best).map(|(l, _)| l)
    }

    fn on_alert(&mut self, idx: usize, alert: &CongestionAlert, env: SignedEnvelope, now: f64) {
        self.m.messages.alerts_issued += 1;
        let lane = self.resolve_alert_lane(alert);
        let window = self.sc.detection.window;
        let mut matches = false;
        for inc in &mut self.incidents {
            let active = inc.start <= now && inc.end.map_or(true, |e| now <= e + window);
            if active && inc.rid == alert.rid && Some(inc.lid) == lane {
                matches = true;
                if inc.first_alert.is_none() {
                    inc.first_alert = Some(now);
                }
            }
        }
        if matches {
            self.m.true_alerts += 1;
        } else {
            self.m.false_alerts += 1;
        }
        self.m.alerts.push(AlertRecord {
            time: now,
            rid: alert.rid.0,
            lane: lane.map(|l| l.0),
            center: alert.center,
            vehicles: alert.vehicle_count,
            emergency: alert.includes_emergency,
            matches_incident: matches,
        });
        let id = self.mrsus[idx].agent.id;
        self.event(
            now,
            "alert",
            id,
            alert.rid.0,
            format!(
                "lane={} vehicles={} center={:.3} true={}",
                lane.map_or(0, |l| l.0),
                alert.vehicle_count,
                alert.center,
                matches
            ),
        );
        self.alert_times.insert(alert_id(&env), now);
        let targets: Vec<usize> = [self.mrsus[idx].from_lbs, self.mrsus[idx].to_lbs]
            .into_iter()
            .flatten()
            .collect();
        let first = targets.into_iter().map(|li| (li, env.clone(), 0, None)).collect();
        self.lbs_deliver(first, now, None);
    }

    /// Delivers an alert to base stations and follows their forwards. All
    /// direct deliveries happen before any forward is processed.
    fn lbs_deliver(
        &mut self,
        first: VecDeque<(usize, SignedEnvelope, u32, Option<AgentId>)>,
        now: f64,
        forged: Option<ForgeMode>,
    ) {
        let mut work = first;
        while let Some((li, env, hops, from)) = work.pop_front() {
            self.m.messages.alert_deliveries += 1;
            let boundary = self.lbs[li].signal.next_boundary();
            let actions = self.lbs[li].handle_alert(&env, hops, from, &self.layout.net, now);
            let me = self.lbs[li].id;
            let mut dropped = false;
            for a in actions {
                match a {
                    LbsAction::Command(cmd) => self.record_command(cmd, Some(boundary)),
                    LbsAction::Forward { to, envelope, hops } => {
                        self.m.messages.alerts_forwarded += 1;
                        self.event(now, "forward", me, to, format!("hops={hops}"));
                        if let Some(&ti) = self.lbs_by_id.get(&to) {
                            work.push_back((ti, envelope, hops, Some(me)));
                        }
                    }
                    LbsAction::NoCommand { reason } => {
                        *self.m.diagnostics.lbs_no_command.entry(reason.to_string()).or_default() += 1;
                    }
                    LbsAction::Dropped(d) => {
                        dropped = true;
                        match forged {
                            Some(mode) => self.forge_outcome(mode, Some(format!("{d:?}")), now, li),
                            None => DropCounts::bump(&mut self.m.drops.lbs, d),
                        }
                    }
                }
            }
            if let (Some(mode), false) = (forged, dropped) {
                self.forge_outcome(mode, None, now, li);
            }
        }
    }

    fn forge(&mut self, adv: usize, k: u32, now: f64) {
        let AdversaryConfig::Forge { rid, targets, .. } = &self.advs[adv].0 else { unreachable!() };
        let rid = SegmentId(*rid);
        let target = targets[(k as usize / 2) % targets.len()];
        let mode = if k % 2 == 0 { ForgeMode::Uncertified } else { ForgeMode::Mismatch };
        let AdvState::Forge { forger, captured } = &self.advs[adv].1 else { unreachable!() };
        let seg = self.layout.net.segment(rid).expect("validated segment");
        let lid = seg.lanes[0].lid;
        let at = seg.lane_point(lid, 100.0_f64.min(seg.length() / 2.0), self.sc.lane_width).expect("lane");
        let payload = forged_payload(target, rid, seg.mrsu_id, lid, at, now);
        let subject = match target {
            ForgeTarget::Status => CertSubject::Pseudonym,
            ForgeTarget::Alert => CertSubject::Infrastructure(seg.mrsu_id),
            ForgeTarget::Exit => CertSubject::Infrastructure(seg.rsu_ids[0]),
        };
        let env = forger.forge(mode, payload, subject, captured, now);
        self.m.adversary.forge.sent += 1;
        match mode {
            ForgeMode::Uncertified => self.m.adversary.forge.uncertified += 1,
            ForgeMode::Mismatch => self.m.adversary.forge.mismatched += 1,
        }
        let midx = self.mrsu_by_rid[&rid];
        match target {
            ForgeTarget::Status => self.deliver_mrsu(midx, MrsuInput::Status(env), Origin::Forged(mode), now),
            ForgeTarget::Exit => self.deliver_mrsu(midx, MrsuInput::Exit(env), Origin::Forged(mode), now),
            ForgeTarget::Alert => {
                let li = self.mrsus[midx].to_lbs.or(self.mrsus[midx].from_lbs);
                match li {
                    Some(li) => self.lbs_deliver(VecDeque::from([(li, env, 0, None)]), now, Some(mode)),
                    None => self.forge_outcome(mode, Some("NoBaseStation".into()), now, midx),
                }
            }
        }
    }

    fn flood(&mut self, adv: usize, now: f64) {
        let AdversaryConfig::DosFlood { rid, .. } = &self.advs[adv].0 else { unreachable!() };
        let rid = SegmentId(*rid);
        let AdvState::Flood { forger, end, interval } = &self.advs[adv].1 else { unreachable!() };
        let (end, interval) = (*end, *interval);
        let seg = self.layout.net.segment(rid).expect("validated segment");
        let lid = seg.lanes[0].lid;
        let payload = forged_payload(ForgeTarget::Status, rid, seg.mrsu_id, lid, seg.start, now);
        let env = forger.uncertified(payload, CertSubject::Pseudonym, self.ca.id(), now);
        self.m.adversary.flood.sent += 1;
        let midx = self.mrsu_by_rid[&rid];
        self.deliver_mrsu(midx, MrsuInput::Status(env), Origin::Flood, now);
        if now + interval < end {
            self.schedule(now + interval, Event::Flood { adv });
        }
    }

    fn botnet_start(&mut self, adv: usize, now: f64) {
        let AdversaryConfig::Botnet { rid, members, .. } = &self.advs[adv].0 else { unreachable!() };
        let (rid, n) = (SegmentId(*rid), *members);
        let mut enlisted = Vec::new();
        for i in 0..n {
            let hsm = Hsm::from_seed(self.key_rng.next_u64());
            let m = BotnetMember::enlist(format!("BOT-{adv}-{i}"), &self.ca, hsm, rid, now).expect("registration");
            enlisted.push(m);
        }
        self.m.adversary.botnet.members += n as u64;
        self.event(now, "botnet", format!("X{adv}"), rid.0, format!("members={n}"));
        if let AdvState::Botnet { members, .. } = &mut self.advs[adv].1 {
            *members = enlisted;
        }
        self.botnet_report(adv, now);
    }

    fn botnet_report(&mut self, adv: usize, now: f64) {
        let AdversaryConfig::Botnet { rid, lid, location, .. } = &self.advs[adv].0 else { unreachable!() };
        let rid = SegmentId(*rid);
        let seg = self.layout.net.segment(rid).expect("validated segment");
        let lid = lid.map(LaneId).unwrap_or(seg.lanes[0].lid);
        let spacing = self.kin.length + self.kin.standstill_gap;
        let AdvState::Botnet { members, end } = &self.advs[adv].1 else { unreachable!() };
        let end = *end;
        let mut envs = Vec::new();
        for (i, m) in members.iter().enumerate() {
            let dist = location - spacing * i as f64;
            let locator = match self.sc.variant {
                Variant::S1 => Locator::Lane { lid, dist },
                Variant::S2 => Locator::Position(seg.lane_point(lid, dist, self.sc.lane_width).expect("lane")),
            };
            envs.push(m.report(rid, seg.mrsu_id, locator, now));
        }
        let midx = self.mrsu_by_rid[&rid];
        for env in envs {
            self.m.adversary.botnet.reports += 1;
            self.deliver_mrsu(midx, MrsuInput::Status(env), Origin::Botnet, now);
        }
        let next = now + self.timing.status_period;
        if next < end {
            self.schedule(next, Event::BotnetReport { adv });
        }
    }

    fn finish(mut self) -> SimOutput {
        let horizon = self.sc.horizon;
        let mut delays = Vec::new();
        let mut counts = VehicleCounts {
            spawned: self.m.vehicles.spawned,
            entered: self.m.vehicles.entered,
            finished: self.m.vehicles.finished,
            ..Default::default()
        };
        let mut max_visits = 0u64;
        for v in &self.vehicles {
            let end = v.finished.unwrap_or(horizon);
            delays.push((end - v.depart - v.ff).max(0.0));
            match v.status {
                VStatus::Queued => counts.queued += 1,
                VStatus::Driving => counts.on_road += 1,
                VStatus::Parked => counts.parked += 1,
                VStatus::Done => {}
            }
            max_visits = max_visits.max(v.visits as u64);
            self.m.diagnostics.unclassified_fallbacks += v.agent.unclassified_fallbacks as u64;
            self.m.diagnostics.pseudonym_reissues += v.agent.reissues as u64;
        }
        assert_eq!(
            counts.spawned,
            counts.finished + counts.on_road + counts.queued + counts.parked,
            "vehicle conservation"
        );
        self.m.vehicles = counts;
        self.m.delay = DelayStats::from_samples(delays);
        self.m.diagnostics.unknown_exits = self.mrsus.iter().map(|m| m.agent.unknown_exits).sum();
        self.m.privacy.pseudonyms_used = self.privacy.len() as u64;
        self.m.privacy.violations = self.privacy.values().filter(|s| s.len() > 1).count() as u64;
        self.m.privacy.max_visits_per_vehicle = max_visits;
        self.m.incidents = self
            .incidents
            .iter()
            .map(|i| IncidentRecord {
                rid: i.rid.0,
                lid: i.lid.0,
                location: i.location,
                start: i.start,
                end: i.end,
                first_alert: i.first_alert,
                latency: i.first_alert.map(|a| a - i.start),
            })
            .collect();
        if !self.m.safety.min_cycle.is_finite() {
            self.m.safety.min_cycle = 0.0;
        }
        SimOutput {
            summary: self.m,
            events: self.log,
        }
    }
}

/// Convenience wrapper: build and run a scenario.
pub fn run(sc: &Scenario, config_hash: String) -> Result<SimOutput, ScenarioError> {
    Ok(Simulation::new(sc)?.run(config_hash))
}
