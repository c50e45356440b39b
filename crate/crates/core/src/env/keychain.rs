//! Door-key gridworld with a fixed prerequisite chain of rooms.
//!
//! Each seed draws door positions along the shared walls, key, start and goal
//! positions inside their rooms, and optionally a color palette. Generation
//! retries until a breadth-first search finds a run that unlocks everything.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{complete, AchievementEnv, AchievementGraph, AchievementId, Observation, StepResult, UnlockState};
use crate::error::{Error, Result};

/// Side of the square egocentric view.
pub const CROP: usize = 7;
/// up, down, left, right, interact.
pub const ACTIONS: usize = 5;
const INTERACT: usize = 4;
const DIRS: [(isize, isize); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

const KINDS: usize = 6;
const COLORS: usize = 5;
const CHANNELS: usize = KINDS + 2 * COLORS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Yellow,
    Purple,
    Cyan,
    Green,
    Red,
}

impl Color {
    pub const ALL: [Color; COLORS] = [Color::Yellow, Color::Purple, Color::Cyan, Color::Green, Color::Red];

    pub fn index(self) -> usize {
        self as usize
    }

    fn bit(self) -> u8 {
        1 << self.index()
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
            Color::Green => "green",
            Color::Red => "red",
        }
    }
}

/// Static contents of a grid cell at generation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Empty,
    Wall,
    Door(Color),
    Key(Color),
    Goal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Three rooms, six achievements.
    Small,
    /// Six rooms, ten achievements.
    #[default]
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeychainConfig {
    pub variant: Variant,
    /// Interior side length of a room.
    pub room_size: usize,
    pub max_steps: usize,
    pub randomize_palette: bool,
}

impl Default for KeychainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            room_size: 4,
            max_steps: 400,
            randomize_palette: false,
        }
    }
}

impl KeychainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.room_size < 3 {
            return Err(Error::Config("keychain room_size must be at least 3".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("keychain max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Room {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

impl Room {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y0 + self.h).flat_map(move |y| (self.x0..self.x0 + self.w).map(move |x| (x, y)))
    }
}

/// Which rooms hold what, per variant.
struct Blueprint {
    rooms: Vec<Room>,
    width: usize,
    height: usize,
    /// `(color, room a, room b)`.
    doors: Vec<(Color, usize, usize)>,
    /// `(color, room)`.
    keys: Vec<(Color, usize)>,
    goal_room: usize,
}

impl Blueprint {
    fn new(variant: Variant, s: usize) -> Self {
        let st = s + 1;
        let room = |c: usize, r: usize| Room {
            x0: 1 + c * st,
            y0: 1 + r * st,
            w: s,
            h: s,
        };
        match variant {
            Variant::Full => Self {
                rooms: vec![room(0, 0), room(1, 0), room(2, 0), room(0, 1), room(1, 1), room(2, 1)],
                width: 3 * st + 1,
                height: 2 * st + 1,
                doors: vec![
                    (Color::Yellow, 0, 1),
                    (Color::Purple, 1, 2),
                    (Color::Cyan, 0, 3),
                    (Color::Green, 2, 5),
                    (Color::Red, 5, 4),
                ],
                keys: vec![(Color::Purple, 1), (Color::Cyan, 2), (Color::Green, 2), (Color::Red, 5)],
                goal_room: 4,
            },
            Variant::Small => Self {
                rooms: vec![
                    room(0, 0),
                    room(1, 0),
                    Room {
                        x0: 1,
                        y0: 1 + st,
                        w: 2 * s + 1,
                        h: s,
                    },
                ],
                width: 2 * st + 1,
                height: 2 * st + 1,
                doors: vec![(Color::Yellow, 0, 1), (Color::Purple, 1, 2), (Color::Cyan, 0, 2)],
                keys: vec![(Color::Purple, 1), (Color::Cyan, 2)],
                goal_room: 2,
            },
        }
    }
}

/// Achievement ids for the events of one variant.
#[derive(Clone, Debug)]
struct EventTable {
    door: [Option<AchievementId>; COLORS],
    key: [Option<AchievementId>; COLORS],
    goal: AchievementId,
}

fn variant_graph(variant: Variant) -> (AchievementGraph, EventTable) {
    use Color::*;
    let (events, edges): (Vec<_>, Vec<(usize, usize)>) = match variant {
        Variant::Full => (
            vec![
                ("door", Some(Yellow)),
                ("key", Some(Purple)),
                ("door", Some(Purple)),
                ("key", Some(Cyan)),
                ("door", Some(Cyan)),
                ("key", Some(Green)),
                ("door", Some(Green)),
                ("key", Some(Red)),
                ("door", Some(Red)),
                ("goal", None),
            ],
            vec![(0, 1), (1, 2), (2, 3), (3, 4), (2, 5), (5, 6), (6, 7), (7, 8), (8, 9)],
        ),
        Variant::Small => (
            vec![
                ("door", Some(Yellow)),
                ("key", Some(Purple)),
                ("door", Some(Purple)),
                ("key", Some(Cyan)),
                ("door", Some(Cyan)),
                ("goal", None),
            ],
            vec![(0, 1), (1, 2), (2, 3), (3, 4), (2, 5)],
        ),
    };
    let mut table = EventTable {
        door: [None; COLORS],
        key: [None; COLORS],
        goal: 0,
    };
    let mut names = Vec::new();
    for (id, (kind, color)) in events.iter().enumerate() {
        match (*kind, color) {
            ("door", Some(c)) => {
                table.door[c.index()] = Some(id);
                names.push(format!("open_{}_door", c.name()));
            }
            ("key", Some(c)) => {
                table.key[c.index()] = Some(id);
                names.push(format!("get_{}_key", c.name()));
            }
            _ => {
                table.goal = id;
                names.push("reach_goal".into());
            }
        }
    }
    let graph = AchievementGraph::new(names, edges).expect("static graph is acyclic");
    (graph, table)
}

/// A generated world. Keys and doors stay in `cells`; whether they are
/// still present or open lives in [`SimState`].
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    cells: Vec<Cell>,
    pub start: (usize, usize),
    /// Displayed channel for each logical color.
    pub palette: [usize; COLORS],
}

impl Layout {
    pub fn cell(&self, x: usize, y: usize) -> Cell {
        self.cells[y * self.width + x]
    }

    fn set(&mut self, x: usize, y: usize, c: Cell) {
        self.cells[y * self.width + x] = c;
    }

    fn doors_mask(&self) -> u8 {
        self.cells
            .iter()
            .fold(0, |m, c| if let Cell::Door(col) = c { m | col.bit() } else { m })
    }

    fn keys_mask(&self) -> u8 {
        self.cells
            .iter()
            .fold(0, |m, c| if let Cell::Key(col) = c { m | col.bit() } else { m })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct SimState {
    pos: (usize, usize),
    keys: u8,
    open: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Event {
    Key(Color),
    Door(Color),
    Goal,
}

/// Pure transition shared by the environment and the planner.
fn transition(layout: &Layout, s: SimState, action: usize) -> (SimState, Option<Event>) {
    let mut next = s;
    if action == INTERACT {
        for (dx, dy) in DIRS {
            let (x, y) = (s.pos.0 as isize + dx, s.pos.1 as isize + dy);
            if x < 0 || y < 0 || x as usize >= layout.width || y as usize >= layout.height {
                continue;
            }
            if let Cell::Door(c) = layout.cell(x as usize, y as usize) {
                let usable = c == Color::Yellow || s.keys & c.bit() != 0;
                if s.open & c.bit() == 0 && usable {
                    next.open |= c.bit();
                    return (next, Some(Event::Door(c)));
                }
            }
        }
        return (next, None);
    }
    let (dx, dy) = DIRS[action];
    let (x, y) = ((s.pos.0 as isize + dx) as usize, (s.pos.1 as isize + dy) as usize);
    match layout.cell(x, y) {
        Cell::Wall => (next, None),
        Cell::Door(c) if s.open & c.bit() == 0 => (next, None),
        Cell::Key(c) if s.keys & c.bit() == 0 => {
            next.pos = (x, y);
            next.keys |= c.bit();
            (next, Some(Event::Key(c)))
        }
        Cell::Goal => {
            next.pos = (x, y);
            (next, Some(Event::Goal))
        }
        _ => {
            next.pos = (x, y);
            (next, None)
        }
    }
}

/// Shortest action sequence from `s` that opens every door, holds every
/// key, and ends on the goal.
fn plan(layout: &Layout, s: SimState) -> Option<Vec<usize>> {
    let (all_doors, all_keys) = (layout.doors_mask(), layout.keys_mask());
    let index = |s: &SimState| ((s.pos.1 * layout.width + s.pos.0) * 32 + s.keys as usize) * 32 + s.open as usize;
    let n = layout.width * layout.height * 32 * 32;
    let mut parent: Vec<u32> = vec![u32::MAX; n];
    let mut via: Vec<u8> = vec![0; n];
    let start = index(&s);
    parent[start] = start as u32;
    let mut queue = VecDeque::from([s]);
    while let Some(cur) = queue.pop_front() {
        let ci = index(&cur);
        for a in 0..ACTIONS {
            let (nx, ev) = transition(layout, cur, a);
            if ev == Some(Event::Goal) {
                if nx.keys != all_keys || nx.open != all_doors {
                    continue;
                }
                let mut actions = vec![a];
                let mut k = ci;
                while k != start {
                    actions.push(via[k] as usize);
                    k = parent[k] as usize;
                }
                actions.reverse();
                return Some(actions);
            }
            let ni = index(&nx);
            if parent[ni] == u32::MAX {
                parent[ni] = ci as u32;
                via[ni] = a as u8;
                queue.push_back(nx);
            }
        }
    }
    None
}

fn try_generate(cfg: &KeychainConfig, rng: &mut ChaCha8Rng) -> Layout {
    let bp = Blueprint::new(cfg.variant, cfg.room_size);
    let (w, h) = (bp.width, bp.height);
    let mut layout = Layout {
        width: w,
        height: h,
        cells: vec![Cell::Wall; w * h],
        start: (0, 0),
        palette: [0, 1, 2, 3, 4],
    };
    for r in &bp.rooms {
        for (x, y) in r.cells() {
            layout.set(x, y, Cell::Empty);
        }
    }
    let mut door_cells = Vec::new();
    for &(color, a, b) in &bp.doors {
        let (ra, rb) = (bp.rooms[a], bp.rooms[b]);
        let joins = |p: (usize, usize), q: (usize, usize)| {
            (ra.contains(p.0, p.1) && rb.contains(q.0, q.1)) || (rb.contains(p.0, p.1) && ra.contains(q.0, q.1))
        };
        let candidates: Vec<(usize, usize)> = (1..h - 1)
            .flat_map(|y| (1..w - 1).map(move |x| (x, y)))
            .filter(|&(x, y)| {
                layout.cell(x, y) == Cell::Wall && (joins((x - 1, y), (x + 1, y)) || joins((x, y - 1), (x, y + 1)))
            })
            .collect();
        let &(x, y) = candidates.choose(rng).expect("rooms share a wall");
        layout.set(x, y, Cell::Door(color));
        door_cells.push((x, y));
    }
    let near_door = |x: usize, y: usize| door_cells.iter().any(|&(dx, dy)| dx.abs_diff(x) + dy.abs_diff(y) <= 1);
    let mut free: Vec<Vec<(usize, usize)>> = bp
        .rooms
        .iter()
        .map(|r| r.cells().filter(|&(x, y)| !near_door(x, y)).collect())
        .collect();
    let mut take = |room: usize, rng: &mut ChaCha8Rng| {
        let cells = &mut free[room];
        let i = rng.gen_range(0..cells.len());
        cells.swap_remove(i)
    };
    for &(color, room) in &bp.keys {
        let (x, y) = take(room, rng);
        layout.set(x, y, Cell::Key(color));
    }
    let (gx, gy) = take(bp.goal_room, rng);
    layout.set(gx, gy, Cell::Goal);
    layout.start = take(0, rng);
    if cfg.randomize_palette {
        layout.palette.shuffle(rng);
    }
    layout
}

/// Deterministic world for `seed`; every returned layout is solvable.
pub fn generate(cfg: &KeychainConfig, seed: u64) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let layout = try_generate(cfg, &mut rng);
        let s = SimState {
            pos: layout.start,
            keys: 0,
            open: 0,
        };
        if plan(&layout, s).is_some() {
            return layout;
        }
    }
}

#[derive(Clone, Debug)]
pub struct KeychainEnv {
    config: KeychainConfig,
    graph: AchievementGraph,
    events: EventTable,
    layout: Layout,
    state: SimState,
    unlocked: UnlockState,
    steps: usize,
    done: bool,
}

impl KeychainEnv {
    pub fn new(config: KeychainConfig) -> Result<Self> {
        config.validate()?;
        let (graph, events) = variant_graph(config.variant);
        let layout = generate(&config, 0);
        let state = SimState {
            pos: layout.start,
            keys: 0,
            open: 0,
        };
        Ok(Self {
            config,
            graph,
            events,
            layout,
            state,
            unlocked: UnlockState::default(),
            steps: 0,
            done: false,
        })
    }

    pub fn config(&self) -> &KeychainConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn position(&self) -> (usize, usize) {
        self.state.pos
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Shortest completion of every achievement from the current state.
    pub fn solve(&self) -> Option<Vec<usize>> {
        plan(&self.layout, self.state)
    }

    /// Cell as currently seen: collected keys are empty floor.
    fn live_cell(&self, x: usize, y: usize) -> (usize, Option<Color>) {
        match self.layout.cell(x, y) {
            Cell::Empty => (0, None),
            Cell::Wall => (1, None),
            Cell::Door(c) if self.state.open & c.bit() == 0 => (2, Some(c)),
            Cell::Door(c) => (3, Some(c)),
            Cell::Key(c) if self.state.keys & c.bit() == 0 => (4, Some(c)),
            Cell::Key(_) => (0, None),
            Cell::Goal => (5, Some(Color::Green)),
        }
    }

    fn observe(&self) -> Observation {
        let plane = CROP * CROP;
        let mut obs = vec![0.0f32; CHANNELS * plane];
        let half = (CROP / 2) as isize;
        let (ax, ay) = (self.state.pos.0 as isize, self.state.pos.1 as isize);
        for row in 0..CROP {
            for col in 0..CROP {
                let (x, y) = (ax + col as isize - half, ay + row as isize - half);
                let inside = x >= 0 && y >= 0 && (x as usize) < self.layout.width && (y as usize) < self.layout.height;
                let (kind, color) = if inside {
                    self.live_cell(x as usize, y as usize)
                } else {
                    (1, None)
                };
                let at = row * CROP + col;
                obs[kind * plane + at] = 1.0;
                if let Some(c) = color {
                    obs[(KINDS + self.layout.palette[c.index()]) * plane + at] = 1.0;
                }
            }
        }
        for c in Color::ALL {
            if self.state.keys & c.bit() != 0 {
                let ch = KINDS + COLORS + self.layout.palette[c.index()];
                obs[ch * plane..(ch + 1) * plane].fill(1.0);
            }
        }
        obs
    }

    /// Rows of characters for debugging: `#` wall, `A` agent, `D`/`d` closed
    /// or open door, `k` key, `G` goal.
    pub fn render_ascii(&self) -> String {
        let mut out = String::new();
        for y in 0..self.layout.height {
            for x in 0..self.layout.width {
                let ch = if (x, y) == self.state.pos {
                    'A'
                } else {
                    match self.live_cell(x, y).0 {
                        1 => '#',
                        2 => 'D',
                        3 => 'd',
                        4 => 'k',
                        5 => 'G',
                        _ => '.',
                    }
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

impl AchievementEnv for KeychainEnv {
    fn id(&self) -> String {
        match self.config.variant {
            Variant::Small => "keychain-small".into(),
            Variant::Full => "keychain".into(),
        }
    }

    fn graph(&self) -> &AchievementGraph {
        &self.graph
    }

    fn num_actions(&self) -> usize {
        ACTIONS
    }

    fn observation_shape(&self) -> (usize, usize, usize) {
        (CHANNELS, CROP, CROP)
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.layout = generate(&self.config, seed);
        self.state = SimState {
            pos: self.layout.start,
            keys: 0,
            open: 0,
        };
        self.unlocked = UnlockState::default();
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        if action >= ACTIONS {
            return Err(Error::InvalidAction {
                action,
                num_actions: ACTIONS,
            });
        }
        let (next, event) = transition(&self.layout, self.state, action);
        self.state = next;
        self.steps += 1;
        let unlocked = event.map(|e| match e {
            Event::Door(c) => self.events.door[c.index()].expect("door has an achievement"),
            Event::Key(c) => self.events.key[c.index()].expect("key has an achievement"),
            Event::Goal => self.events.goal,
        });
        let reward = unlocked.map_or(0.0, |id| complete(&mut self.unlocked, id));
        self.done = event == Some(Event::Goal) || self.steps >= self.config.max_steps;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.done,
            unlocked,
        })
    }

    fn unlocked(&self) -> UnlockState {
        self.unlocked
    }

    fn is_done(&self) -> bool {
        self.done
    }
}
