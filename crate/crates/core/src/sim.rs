//! Kinematic tabletop world and its front-view rasterizer.
//!
//! The end effector moves in straight lines at a fixed step length. Grasping and
//! releasing are instantaneous; released objects settle onto the table or into the
//! container underneath them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::common::{
    distance, horizontal_distance, wrap_angle, ActionState, Gripper, Range, RngStream, Workspace,
};
use crate::error::{Error, Result};

pub const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Item,
    Container,
    Distractor,
}

impl ObjectKind {
    pub fn graspable(self) -> bool {
        !matches!(self, ObjectKind::Container)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub kind: ObjectKind,
    /// Center of the object, meters.
    pub position: [f64; 3],
    pub radius: f64,
    pub intensity: u8,
}

/// The immutable part of an object: what a task asks the sampler to place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectTemplate {
    pub id: String,
    pub radius: f64,
    pub intensity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementRegion {
    pub x: Range,
    pub y: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub instruction: String,
    pub item: ObjectTemplate,
    pub container: ObjectTemplate,
    pub containment_radius: f64,
    pub placement: PlacementRegion,
    #[serde(default)]
    pub distractors: Vec<ObjectTemplate>,
}

impl TaskSpec {
    pub fn validate(&self, w: &Workspace) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("task `{}`: {m}", self.name)));
        if self.instruction.trim().is_empty() {
            return bad("instruction is empty".into());
        }
        if self.item.id == self.container.id {
            return bad("item and container share an id".into());
        }
        let mut ids = vec![&self.item.id, &self.container.id];
        for d in &self.distractors {
            if ids.contains(&&d.id) {
                return bad(format!("duplicate object id `{}`", d.id));
            }
            ids.push(&d.id);
        }
        for o in self.templates() {
            if !(o.1.radius > 0.0) {
                return bad(format!("object `{}` needs radius > 0", o.1.id));
            }
        }
        // shades must be unique within each kind
        let mut shades: Vec<u8> = self.distractors.iter().map(|d| d.intensity).collect();
        shades.sort_unstable();
        if shades.windows(2).any(|p| p[0] == p[1]) {
            return bad("distractor intensities are not unique".into());
        }
        if !(self.containment_radius > 0.0) {
            return bad("containment radius must be > 0".into());
        }
        let p = &self.placement;
        if !(p.x.min < p.x.max && p.y.min < p.y.max) {
            return bad("placement region is empty".into());
        }
        if !(w.x.contains(p.x.min) && w.x.contains(p.x.max) && w.y.contains(p.y.min) && w.y.contains(p.y.max)) {
            return bad("placement region leaves the workspace".into());
        }
        Ok(())
    }

    fn templates(&self) -> impl Iterator<Item = (ObjectKind, &ObjectTemplate)> {
        [
            (ObjectKind::Container, &self.container),
            (ObjectKind::Item, &self.item),
        ]
        .into_iter()
        .chain(self.distractors.iter().map(|d| (ObjectKind::Distractor, d)))
    }
}

/// Physical and rendering constants of the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub workspace: Workspace,
    pub table_z: f64,
    pub home: ActionState,
    pub step_length: f64,
    pub grasp_radius: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub depth_gain: f64,
    /// Marker side in pixels at the far edge of the workspace.
    pub marker_side: f64,
    pub table_intensity: u8,
    pub marker_intensity: u8,
    pub tick_intensity: u8,
    /// Sub-samples per pixel axis used for edge coverage.
    pub supersample: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            workspace: Workspace::default(),
            table_z: 0.0,
            home: ActionState::new(0.0, 0.25, 0.3, 0.0, Gripper::Open),
            step_length: 0.01,
            grasp_radius: 0.03,
            image_height: 48,
            image_width: 48,
            depth_gain: 0.6,
            marker_side: 5.0,
            table_intensity: 40,
            marker_intensity: 255,
            tick_intensity: 128,
            supersample: 4,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.workspace.validate()?;
        self.home.validate(&self.workspace)?;
        if !self.workspace.z.contains(self.table_z) {
            return Err(Error::invalid("table_z lies outside the workspace"));
        }
        if !(self.step_length > 0.0 && self.grasp_radius > 0.0 && self.depth_gain >= 0.0) {
            return Err(Error::invalid("step_length and grasp_radius must be > 0"));
        }
        if self.image_height == 0 || self.image_width == 0 || self.supersample == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        Ok(())
    }

    /// Apparent size multiplier for an object at depth `y`; nearer is larger.
    pub fn depth_scale(&self, y: f64) -> f64 {
        let ymax = self.workspace.y.max;
        1.0 + self.depth_gain * (ymax - y) / ymax
    }

    pub fn marker_side_at(&self, y: f64) -> f64 {
        self.marker_side * self.depth_scale(y)
    }

    fn col(&self, x: f64) -> f64 {
        let r = self.workspace.x;
        (x - r.min) / r.span() * self.image_width as f64
    }

    fn row(&self, z: f64) -> f64 {
        let r = self.workspace.z;
        (r.max - z) / r.span() * self.image_height as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub robot: ActionState,
    pub attached: Option<String>,
    pub table_z: f64,
    /// Substeps executed since reset.
    pub time: u64,
}

impl Scene {
    pub fn empty(cfg: &SimConfig) -> Self {
        Scene {
            objects: Vec::new(),
            robot: cfg.home,
            attached: None,
            table_z: cfg.table_z,
            time: 0,
        }
    }

    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn object_mut(&mut self, id: &str) -> Option<&mut SceneObject> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    /// Highest object top, used to keep random motion clear of the scene.
    pub fn tallest_top(&self) -> f64 {
        self.objects
            .iter()
            .map(|o| o.position[2] + o.radius)
            .fold(self.table_z, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    /// Row-major grayscale intensities.
    pub pixels: Vec<u8>,
    pub timestep: u64,
}

impl Observation {
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFrame {
    pub observation: Observation,
    pub state: ActionState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<TrajectoryFrame>,
    /// False when `max_substeps` ran out before the target was reached.
    pub complete: bool,
}

/// Samples object positions and puts the robot at home.
pub fn reset(task: &TaskSpec, cfg: &SimConfig, rng: RngStream) -> Result<Scene> {
    let objects: Vec<(ObjectKind, ObjectTemplate)> =
        task.templates().map(|(k, t)| (k, t.clone())).collect();
    place_objects(&objects, &task.placement, cfg, rng)
}

/// Places arbitrary templates without overlap inside `region`.
pub fn place_objects(
    templates: &[(ObjectKind, ObjectTemplate)],
    region: &PlacementRegion,
    cfg: &SimConfig,
    rng: RngStream,
) -> Result<Scene> {
    let mut r = rng.rng();
    let mut scene = Scene::empty(cfg);
    for (kind, t) in templates {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = r.random_range(region.x.min..=region.x.max);
            let y = r.random_range(region.y.min..=region.y.max);
            let p = [x, y, cfg.table_z + t.radius];
            let clear = scene
                .objects
                .iter()
                .all(|o| horizontal_distance(o.position, p) > o.radius + t.radius);
            if clear {
                scene.objects.push(SceneObject {
                    id: t.id.clone(),
                    kind: *kind,
                    position: p,
                    radius: t.radius,
                    intensity: t.intensity,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::UnsatisfiableScene {
                objects: templates.len(),
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }
    Ok(scene)
}

/// Moves toward `target`, recording every substep; toggles the gripper on arrival.
pub fn step(
    scene: &Scene,
    target: &ActionState,
    max_substeps: usize,
    cfg: &SimConfig,
) -> (Scene, Trajectory) {
    let mut s = scene.clone();
    let start = s.robot;
    let dist = distance(start.position(), target.position());
    let n = (dist / cfg.step_length).ceil() as usize;
    let dpsi = wrap_angle(target.psi - start.psi);
    let mut frames = Vec::with_capacity(n.clamp(1, max_substeps.max(1)));

    for k in 1..=n.min(max_substeps) {
        let p = if k == n {
            target.position()
        } else {
            let t = k as f64 * cfg.step_length / dist;
            let (a, b) = (start.position(), target.position());
            [
                a[0] + (b[0] - a[0]) * t,
                a[1] + (b[1] - a[1]) * t,
                a[2] + (b[2] - a[2]) * t,
            ]
        };
        s.robot = s.robot.with_position(p);
        s.robot.phi = target.phi;
        s.robot.theta = target.theta;
        s.robot.psi = wrap_angle(start.psi + dpsi * k as f64 / n as f64);
        s.time += 1;
        carry(&mut s);
        if k == n {
            actuate(&mut s, target.gripper, cfg);
        }
        frames.push(TrajectoryFrame {
            observation: render(&s, cfg),
            state: s.robot,
        });
    }

    if n == 0 {
        s.robot.phi = target.phi;
        s.robot.theta = target.theta;
        s.robot.psi = target.psi;
        s.time += 1;
        actuate(&mut s, target.gripper, cfg);
        frames.push(TrajectoryFrame {
            observation: render(&s, cfg),
            state: s.robot,
        });
    }

    let complete = n <= max_substeps;
    (s, Trajectory { frames, complete })
}

fn carry(s: &mut Scene) {
    if let Some(id) = s.attached.clone() {
        let p = s.robot.position();
        if let Some(o) = s.object_mut(&id) {
            o.position = p;
        }
    }
}

fn actuate(s: &mut Scene, to: Gripper, cfg: &SimConfig) {
    let from = s.robot.gripper;
    s.robot.gripper = to;
    match (from, to) {
        (Gripper::Open, Gripper::Closed) => {
            let ee = s.robot.position();
            let nearest = s
                .objects
                .iter()
                .filter(|o| o.kind.graspable())
                .map(|o| (distance(o.position, ee), o))
                .filter(|(d, _)| *d <= cfg.grasp_radius)
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, o)| o.id.clone());
            if let Some(id) = nearest {
                s.attached = Some(id);
                carry(s);
            }
        }
        (Gripper::Closed, Gripper::Open) => {
            if let Some(id) = s.attached.take() {
                settle(s, &id);
            }
        }
        _ => {}
    }
}

fn settle(s: &mut Scene, id: &str) {
    let Some(obj) = s.object(id).cloned() else {
        return;
    };
    let support = s
        .objects
        .iter()
        .filter(|o| o.kind == ObjectKind::Container && o.id != id)
        .map(|o| (horizontal_distance(o.position, obj.position), o))
        .filter(|(d, o)| *d <= o.radius)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, o)| o.position[2]);
    let z = support.unwrap_or(s.table_z + obj.radius);
    if let Some(o) = s.object_mut(id) {
        o.position[2] = z;
    }
}

pub fn success(scene: &Scene, task: &TaskSpec) -> bool {
    let (Some(item), Some(container)) = (scene.object(&task.item.id), scene.object(&task.container.id))
    else {
        return false;
    };
    scene.attached.as_deref() != Some(item.id.as_str())
        && horizontal_distance(item.position, container.position) <= task.containment_radius
        && (item.position[2] - container.position[2]).abs() <= 1e-9
}

/// Orthographic front view: x to columns, z to rows, depth shown through size.
pub fn render(scene: &Scene, cfg: &SimConfig) -> Observation {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut canvas = Canvas {
        h,
        w,
        ss: cfg.supersample,
        px: vec![0.0; h * w],
    };

    let table_row = (cfg.row(scene.table_z).floor() as usize).min(h - 1);
    for c in 0..w {
        canvas.px[table_row * w + c] = cfg.table_intensity as f64;
    }

    let order = [ObjectKind::Container, ObjectKind::Distractor, ObjectKind::Item];
    for kind in order {
        for o in scene.objects.iter().filter(|o| o.kind == kind) {
            let s = cfg.depth_scale(o.position[1]);
            let rx = o.radius * s / cfg.workspace.x.span() * w as f64;
            let rz = o.radius * s / cfg.workspace.z.span() * h as f64;
            let (cx, cz) = (cfg.col(o.position[0]), cfg.row(o.position[2]));
            canvas.paint(cx - rx, cz - rz, cx + rx, cz + rz, o.intensity, |u, v| {
                let (du, dv) = ((u - cx) / rx, (v - cz) / rz);
                du * du + dv * dv <= 1.0
            });
        }
    }

    let r = scene.robot;
    let half = cfg.marker_side_at(r.y) / 2.0;
    let (cx, cz) = (cfg.col(r.x), cfg.row(r.z));
    let hollow = r.gripper.is_open();
    canvas.paint(cx - half, cz - half, cx + half, cz + half, cfg.marker_intensity, |u, v| {
        let (du, dv) = ((u - cx).abs(), (v - cz).abs());
        let inside = du <= half && dv <= half;
        if hollow {
            inside && (du > half - 1.0 || dv > half - 1.0)
        } else {
            inside
        }
    });
    for k in 1..=3 {
        let u = cx + k as f64 * r.psi.cos();
        let v = cz - k as f64 * r.psi.sin();
        if u >= 0.0 && v >= 0.0 && (u as usize) < w && (v as usize) < h {
            canvas.px[v as usize * w + u as usize] = cfg.tick_intensity as f64;
        }
    }

    Observation {
        height: h,
        width: w,
        pixels: canvas.px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
        timestep: scene.time,
    }
}

struct Canvas {
    h: usize,
    w: usize,
    ss: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Blends `intensity` into every pixel of the box by the covered sample fraction.
    fn paint(
        &mut self,
        u0: f64,
        v0: f64,
        u1: f64,
        v1: f64,
        intensity: u8,
        inside: impl Fn(f64, f64) -> bool,
    ) {
        let c0 = u0.floor().max(0.0) as usize;
        let r0 = v0.floor().max(0.0) as usize;
        let c1 = (u1.ceil().max(0.0) as usize).min(self.w);
        let r1 = (v1.ceil().max(0.0) as usize).min(self.h);
        let ss = self.ss;
        let total = (ss * ss) as f64;
        for row in r0..r1 {
            for col in c0..c1 {
                let mut hits = 0usize;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let u = col as f64 + (sx as f64 + 0.5) / ss as f64;
                        let v = row as f64 + (sy as f64 + 0.5) / ss as f64;
                        if inside(u, v) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let a = hits as f64 / total;
                    let p = &mut self.px[row * self.w + col];
                    *p = *p * (1.0 - a) + intensity as f64 * a;
                }
            }
        }
    }
}

/// The default pick-and-place tasks.
pub fn default_tasks() -> Vec<TaskSpec> {
    let region = PlacementRegion {
        x: Range::new(-0.3, 0.3),
        y: Range::new(0.24, 0.26),
    };
    vec![
        TaskSpec {
            name: "banana_in_plate".into(),
            instruction: "put the banana in the plate".into(),
            item: ObjectTemplate {
                id: "banana".into(),
                radius: 0.03,
                intensity: 220,
            },
            container: ObjectTemplate {
                id: "plate".into(),
                radius: 0.06,
                intensity: 100,
            },
            containment_radius: 0.06,
            placement: region.clone(),
            distractors: vec![],
        },
        TaskSpec {
            name: "cube_in_bowl".into(),
            instruction: "put the cube in the bowl".into(),
            item: ObjectTemplate {
                id: "cube".into(),
                radius: 0.03,
                intensity: 170,
            },
            container: ObjectTemplate {
                id: "bowl".into(),
                radius: 0.06,
                intensity: 70,
            },
            containment_radius: 0.06,
            placement: region,
            distractors: vec![],
        },
    ]
}

/// Held-out variants: unseen item, unseen container, distractors.
pub fn generalization_tasks() -> Vec<TaskSpec> {
    let base = default_tasks();
    let mut unseen_item = base[0].clone();
    unseen_item.name = "strawberry_in_plate".into();
    unseen_item.instruction = "put the strawberry in the plate".into();
    unseen_item.item = ObjectTemplate {
        id: "strawberry".into(),
        radius: 0.035,
        intensity: 200,
    };

    let mut unseen_container = base[1].clone();
    unseen_container.name = "cube_in_box".into();
    unseen_container.instruction = "put the cube in the box".into();
    unseen_container.container = ObjectTemplate {
        id: "box".into(),
        radius: 0.07,
        intensity: 130,
    };
    unseen_container.containment_radius = 0.07;

    let mut distracted = base[0].clone();
    distracted.name = "banana_in_plate_distractors".into();
    distracted.distractors = vec![
        ObjectTemplate {
            id: "grape".into(),
            radius: 0.025,
            intensity: 150,
        },
        ObjectTemplate {
            id: "corn".into(),
            radius: 0.03,
            intensity: 190,
        },
    ];
    vec![unseen_item, unseen_container, distracted]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::common::derive_stream;
    use std::f64::consts::PI;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    fn task() -> TaskSpec {
        default_tasks().remove(0)
    }

    #[test]
    fn reset_is_deterministic() {
        let a = reset(&task(), &cfg(), derive_stream(3, 9)).unwrap();
        let b = reset(&task(), &cfg(), derive_stream(3, 9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.objects.len(), 2);
        assert_eq!(a.robot, cfg().home);
        assert!(a.robot.gripper.is_open());
    }

    #[test]
    fn resets_never_overlap() {
        let mut t = task();
        t.distractors = generalization_tasks()[2].distractors.clone();
        for seed in 0..10_000u64 {
            let s = reset(&t, &cfg(), derive_stream(seed, 0)).unwrap();
            for (i, a) in s.objects.iter().enumerate() {
                for b in &s.objects[i + 1..] {
                    assert!(horizontal_distance(a.position, b.position) > a.radius + b.radius);
                }
            }
        }
    }

    #[test]
    fn impossible_layout_errors() {
        let mut t = task();
        t.placement.x = Range::new(0.0, 0.001);
        t.placement.y = Range::new(0.2, 0.201);
        assert!(matches!(
            reset(&t, &cfg(), derive_stream(0, 0)),
            Err(Error::UnsatisfiableScene { .. })
        ));
    }

    #[test]
    fn zero_motion_step_only_toggles_gripper() {
        let c = cfg();
        let s = reset(&task(), &c, derive_stream(1, 0)).unwrap();
        let target = s.robot.with_gripper(Gripper::Closed);
        let (next, traj) = step(&s, &target, 100, &c);
        assert_eq!(traj.frames.len(), 1);
        assert!(traj.complete);
        assert_eq!(next.objects, s.objects);
        assert_eq!(next.robot, target);
    }

    #[test]
    fn straight_line_motion_at_fixed_step() {
        let c = cfg();
        let s = Scene::empty(&c);
        let target = s.robot.with_position([0.1, 0.25, 0.3]);
        let (next, traj) = step(&s, &target, 100, &c);
        assert_eq!(traj.frames.len(), 10);
        for w in traj.frames.windows(2) {
            let d = w[0].state.distance_to(&w[1].state);
            assert!((d - 0.01).abs() < 1e-9);
        }
        assert_eq!(next.robot, target);
        let (_, short) = step(&s, &target, 4, &c);
        assert!(!short.complete);
        assert_eq!(short.frames.len(), 4);
    }

    fn grasp_scene(offset: f64) -> (Scene, TaskSpec) {
        let c = cfg();
        let t = task();
        let mut s = reset(&t, &c, derive_stream(5, 0)).unwrap();
        let item = s.object("banana").unwrap().position;
        s.robot = s.robot.with_position([item[0] + offset, item[1], item[2]]);
        (s, t)
    }

    #[test]
    fn closing_near_item_attaches_it() {
        let c = cfg();
        let (s, _) = grasp_scene(0.02);
        let (next, _) = step(&s, &s.robot.with_gripper(Gripper::Closed), 10, &c);
        assert_eq!(next.attached.as_deref(), Some("banana"));
        assert_eq!(next.object("banana").unwrap().position, next.robot.position());

        let (far, _) = grasp_scene(0.04);
        let (next, _) = step(&far, &far.robot.with_gripper(Gripper::Closed), 10, &c);
        assert_eq!(next.attached, None);
    }

    #[test]
    fn attached_item_follows_and_settles_in_container() {
        let c = cfg();
        let (s, t) = grasp_scene(0.0);
        let (s, _) = step(&s, &s.robot.with_gripper(Gripper::Closed), 10, &c);
        let plate = s.object("plate").unwrap().position;
        let above = s.robot.with_position([plate[0], plate[1], 0.15]);
        let (s, traj) = step(&s, &above, 200, &c);
        assert!(traj.complete);
        assert_eq!(s.object("banana").unwrap().position, s.robot.position());
        assert!(!success(&s, &t), "attached item must not count");
        let (s, _) = step(&s, &above.with_gripper(Gripper::Open), 10, &c);
        assert_eq!(s.attached, None);
        assert_eq!(s.object("banana").unwrap().position[2], plate[2]);
        assert!(success(&s, &t));
    }

    #[test]
    fn release_away_from_container_drops_to_table() {
        let c = cfg();
        let (s, t) = grasp_scene(0.0);
        let (s, _) = step(&s, &s.robot.with_gripper(Gripper::Closed), 10, &c);
        let plate = s.object("plate").unwrap().position;
        let away = s.robot.with_position([plate[0] + 0.15, plate[1], 0.2]);
        let (s, _) = step(&s, &away, 200, &c);
        let (s, _) = step(&s, &away.with_gripper(Gripper::Open), 10, &c);
        assert_eq!(s.object("banana").unwrap().position[2], 0.03);
        assert!(!success(&s, &t));
    }

    #[test]
    fn success_boundary_is_inclusive() {
        let c = cfg();
        let t = task();
        let mut s = reset(&t, &c, derive_stream(8, 0)).unwrap();
        let plate = s.object("plate").unwrap().position;
        let item = s.object_mut("banana").unwrap();
        item.position = [plate[0] + t.containment_radius, plate[1], plate[2]];
        assert!(success(&s, &t));
        s.object_mut("banana").unwrap().position[0] += 1e-6;
        assert!(!success(&s, &t));
    }

    #[test]
    fn render_is_pure() {
        let c = cfg();
        let s = reset(&task(), &c, derive_stream(2, 0)).unwrap();
        assert_eq!(render(&s, &c), render(&s.clone(), &c));
    }

    #[test]
    fn empty_scene_is_background_plus_table() {
        let c = cfg();
        let mut s = Scene::empty(&c);
        s.robot.x = 10.0; // marker off-canvas
        let o = render(&s, &c);
        for r in 0..o.height {
            for col in 0..o.width {
                let want = if r == o.height - 1 { c.table_intensity } else { 0 };
                assert_eq!(o.at(r, col), want);
            }
        }
    }

    #[test]
    fn marker_size_encodes_depth() {
        let c = cfg();
        let near = c.marker_side_at(c.workspace.y.min);
        let far = c.marker_side_at(c.workspace.y.max);
        assert!((near / far - (1.0 + c.depth_gain)).abs() < 1e-12);

        // Rasterized: summed column coverage of a filled marker equals its side.
        let extent = |y: f64| {
            let mut s = Scene::empty(&c);
            s.robot = ActionState::new(0.0, y, 0.25, 0.0, Gripper::Closed);
            s.robot.psi = PI; // tick points left, away from column 24
            let o = render(&s, &c);
            (0..o.height - 1).map(|r| o.at(r, 24) as f64 / 255.0).sum::<f64>()
        };
        assert!((extent(c.workspace.y.max) - 5.0).abs() < 0.02);
        assert!((extent(c.workspace.y.min) - 8.0).abs() < 0.02);
    }

    #[test]
    fn pgm_header() {
        let c = cfg();
        let o = render(&Scene::empty(&c), &c);
        let pgm = o.to_pgm();
        assert!(pgm.starts_with(b"P5\n48 48\n255\n"));
        assert_eq!(pgm.len(), 13 + 48 * 48);
    }

    #[test]
    fn default_tasks_validate() {
        let w = Workspace::default();
        for t in default_tasks().iter().chain(&generalization_tasks()) {
            t.validate(&w).unwrap();
        }
    }
}
