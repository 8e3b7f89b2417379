"""Synthetic grid-video world: scenes, rendering, captions, exact analysis.

A frame is a 6x8 grid of cell ids. Cell vocabulary (96 ids):
  0..7    background textures
  8..95   subject cells, one id per legal (glyph, color) pair: glyphs 0..7
          pair with all 8 colors, glyphs 8..15 pair with colors 0..2 only
          (88 pairs; the pair table is the world's closed vocabulary)
Subjects are 2x2 blocks of one subject cell id, anchored at the top-left,
moving on deterministic trajectories. Scenes render exactly and analyze
exactly: analyze(render(scene)) recovers texture, subject identities and
per-frame anchors bit for bit, which is what makes programmatic scoring an
oracle rather than an estimate.

Caption language: 64 words. Motion vocabulary splits into 9 actions seen in
pretraining and 8 reserved for fine-tuned custom concepts; textures split
4 seen / 4 reserved; 12 (glyph, color) pairs are reserved as custom subjects
and never rendered in the pretraining corpus.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .rng import make_rng

ROWS, COLS = 6, 8
SUBJECT_SIZE = 2  # subjects are 2x2 blocks
ANCHOR_ROWS = ROWS - SUBJECT_SIZE + 1  # 5
ANCHOR_COLS = COLS - SUBJECT_SIZE + 1  # 7

N_TEXTURES = 8
N_GLYPHS = 16
N_COLORS = 8

# cell id layout
TEXTURE_BASE = 0
SUBJECT_BASE = 8
N_CELLS = 96
MASK_TOKEN = 96
PAD_TOKEN = 97
VIDEO_VOCAB = 98

GLYPHS = ["square", "ring", "star", "cross", "disc", "wedge", "crown", "heart",
          "moon", "leaf", "bolt", "drop", "gem", "bell", "fish", "kite"]
COLORS = ["red", "blue", "green", "yellow", "pink", "cyan", "white", "black"]
TEXTURES = ["forest", "desert", "ocean", "meadow", "tundra", "cavern", "marsh", "dunes"]
ACTIONS = ["resting", "gliding", "sliding", "rising", "sinking", "circling",
           "bobbing", "swaying", "roaming",
           "twirling", "creeping", "backing", "floating", "settling",
           "weaving", "pumping", "wobbling"]
RELATIONS = ["towards", "under", "beside", "in", "with"]
SKS = [f"sks{i}" for i in range(8)]

WORDS = ["a", "the"] + GLYPHS + COLORS + TEXTURES + SKS + RELATIONS + ACTIONS
assert len(WORDS) == 64
WORD_TO_ID = {w: i for i, w in enumerate(WORDS)}
NULL_TOKEN = 64
TEXT_PAD = 65
TEXT_VOCAB = 66
TEXT_LEN = 16

# held-out splits for custom concepts
SEEN_TEXTURES = (0, 1, 2, 3)
CUSTOM_TEXTURES = (4, 5, 6, 7)
SEEN_ACTIONS = tuple(range(9))
CUSTOM_ACTIONS = tuple(range(9, 17))
# (glyph, color) pairs reserved for custom subjects: never in pretraining,
# but every glyph word and color word appears there in other combinations
CUSTOM_PAIRS = tuple((g, c) for g in range(2, 8) for c in (6, 7))
assert len(CUSTOM_PAIRS) == 12


def subject_cell_id(glyph, color):
    """Cell id for a legal (glyph, color) pair."""
    if glyph < 0 or glyph >= N_GLYPHS:
        raise ValueError(f"glyph {glyph} out of range")
    if glyph < 8:
        if color < 0 or color >= 8:
            raise ValueError(f"color {color} out of range for glyph {glyph}")
        return SUBJECT_BASE + glyph * 8 + color
    if color < 0 or color >= 3:
        raise ValueError(f"glyph {glyph} only pairs with colors 0..2")
    return SUBJECT_BASE + 64 + (glyph - 8) * 3 + color


def subject_pair_from_cell(cell):
    if cell < SUBJECT_BASE or cell >= N_CELLS:
        raise ValueError(f"cell {cell} is not a subject cell")
    k = cell - SUBJECT_BASE
    if k < 64:
        return k // 8, k % 8
    k -= 64
    return 8 + k // 3, k % 3


ALL_PAIRS = tuple((g, c) for g in range(8) for c in range(8)) + \
    tuple((g, c) for g in range(8, 16) for c in range(3))
SEEN_PAIRS = tuple(p for p in ALL_PAIRS if p not in CUSTOM_PAIRS)
assert len(ALL_PAIRS) == 88 and len(SEEN_PAIRS) == 76


# deterministic motion patterns: action index -> displacement at time t
_RING = [(0, 0), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]
_OSC1 = [0, 1, 0, -1]
_OSC2 = [0, 1, 2, 1, 0, -1, -2, -1]


def action_displacement(action, t):
    """(dr, dc) of a subject anchor at time t relative to its start anchor."""
    if action == 0:    # resting
        return 0, 0
    if action == 1:    # gliding: east, half speed
        return 0, t // 2
    if action == 2:    # sliding: west, half speed
        return 0, -(t // 2)
    if action == 3:    # rising
        return -(t // 2), 0
    if action == 4:    # sinking
        return t // 2, 0
    if action == 5:    # circling: counterclockwise ring
        dr, dc = _RING[t % 8]
        return dr, dc
    if action == 6:    # bobbing: vertical oscillation
        return _OSC1[t % 4], 0
    if action == 7:    # swaying: horizontal oscillation
        return 0, _OSC1[t % 4]
    if action == 8:    # roaming: slow diagonal
        return t // 4, t // 4
    if action == 9:    # twirling: clockwise ring
        dr, dc = _RING[(-t) % 8]
        return dr, dc
    if action == 10:   # creeping: east, quarter speed
        return 0, t // 4
    if action == 11:   # backing: west, quarter speed
        return 0, -(t // 4)
    if action == 12:   # floating: up, quarter speed
        return -(t // 4), 0
    if action == 13:   # settling: down, quarter speed
        return t // 4, 0
    if action == 14:   # weaving: wide horizontal oscillation
        return 0, _OSC2[t % 8]
    if action == 15:   # pumping: wide vertical oscillation
        return _OSC2[t % 8], 0
    if action == 16:   # wobbling: diagonal oscillation
        d = _OSC1[t % 4]
        return d, d
    raise ValueError(f"unknown action {action}")


def action_fits(action, start, frames, t0=0):
    """True when the whole trajectory stays on the grid."""
    r0, c0 = start
    for t in range(t0, t0 + frames):
        dr, dc = action_displacement(action, t)
        r, c = r0 + dr, c0 + dc
        if not (0 <= r < ANCHOR_ROWS and 0 <= c < ANCHOR_COLS):
            return False
    return True


def valid_starts(action, frames, t0=0):
    return [(r, c) for r in range(ANCHOR_ROWS) for c in range(ANCHOR_COLS)
            if action_fits(action, (r, c), frames, t0)]


@dataclass(frozen=True)
class Subject:
    glyph: int
    color: int
    action: int
    start: tuple  # (row, col) anchor at t=0 of the scene clock

    @property
    def cell(self):
        return subject_cell_id(self.glyph, self.color)

    def anchor(self, t):
        dr, dc = action_displacement(self.action, t)
        return self.start[0] + dr, self.start[1] + dc


# relation kinds for two-subject scenes; "in" is reserved for the
# subject-in-background caption slot, not a subject pair relation
REL_TOWARDS, REL_UNDER, REL_BESIDE, REL_WITH = "towards", "under", "beside", "with"
PAIR_RELATIONS = (REL_TOWARDS, REL_UNDER, REL_BESIDE, REL_WITH)
CONTACT_DIST = 2  # anchor Chebyshev distance at which 2x2 blocks touch


@dataclass(frozen=True)
class Approach:
    """Mover trajectory for "towards": one axis step every 3rd frame, along
    the dominant remaining axis, stopping at contact distance."""
    start: tuple
    target: tuple  # static target anchor

    def anchor(self, t):
        r, c = self.start
        tr, tc = self.target
        for step_t in range(1, t + 1):
            if step_t % 3 != 0:
                continue
            dr, dc = tr - r, tc - c
            if max(abs(dr), abs(dc)) <= CONTACT_DIST:
                break
            if abs(dr) >= abs(dc):
                r += (1 if dr > 0 else -1)
            else:
                c += (1 if dc > 0 else -1)
        return r, c


@dataclass(frozen=True)
class Scene:
    texture: int
    subjects: tuple = ()          # tuple[Subject]
    relation: str = ""            # one of PAIR_RELATIONS when 2 subjects
    approach: object = None       # Approach overriding subjects[0] motion
    t0: int = 0                   # scene clock offset (phase diversity)
    frames: int = 11

    def anchor_of(self, i, t):
        """Anchor of subject i at video frame t (scene clock t0 + t)."""
        tt = self.t0 + t
        if i == 0 and self.approach is not None:
            return self.approach.anchor(tt)
        return self.subjects[i].anchor(tt)


def render(scene):
    """Scene -> (frames, 6, 8) int16 cell grid."""
    video = np.full((scene.frames, ROWS, COLS), np.int16(scene.texture))
    for t in range(scene.frames):
        for i, sub in enumerate(scene.subjects):
            r, c = scene.anchor_of(i, t)
            if not (0 <= r < ANCHOR_ROWS and 0 <= c < ANCHOR_COLS):
                raise ValueError(f"subject {i} off grid at frame {t}: {(r, c)}")
            video[t, r:r + 2, c:c + 2] = sub.cell
    return video


@dataclass
class FrameFacts:
    texture: int                      # -1 when no clean uniform background
    subjects: dict = field(default_factory=dict)  # cell id -> (row, col)


def analyze_frame(frame):
    """Exact frame analysis: subjects are cell ids whose pixels form exactly
    one 2x2 block; background is the single texture id covering the rest."""
    facts = FrameFacts(texture=-1)
    rest_mask = np.ones((ROWS, COLS), dtype=bool)
    for cell in np.unique(frame):
        if cell < SUBJECT_BASE or cell >= N_CELLS:
            continue
        ys, xs = np.nonzero(frame == cell)
        if len(ys) != 4:
            continue
        if ys.max() - ys.min() != 1 or xs.max() - xs.min() != 1:
            continue
        facts.subjects[int(cell)] = (int(ys.min()), int(xs.min()))
        rest_mask[ys, xs] = False
    rest = frame[rest_mask]
    if rest.size and (rest == rest[0]).all() and 0 <= rest[0] < N_TEXTURES:
        facts.texture = int(rest[0])
    return facts


def analyze(video):
    return [analyze_frame(video[t]) for t in range(video.shape[0])]


def scene_matches(scene, video):
    """Exact check that analyze(video) recovers the scene's ground truth."""
    facts = analyze(video)
    for t, f in enumerate(facts):
        if f.texture != scene.texture:
            return False
        expect = {}
        for i, sub in enumerate(scene.subjects):
            expect[sub.cell] = scene.anchor_of(i, t)
        if f.subjects != expect:
            return False
    return True


# caption construction

def caption_tokens(scene, include_colors=None, sks_of=None):
    """Scene -> word list.

    include_colors: per-subject bools (default all True).
    sks_of: optional dict subject_index -> sks identifier string inserted
    after the noun (and after the action word for action-concept exemplars,
    handled by the callers that build fine-tuning data).
    """
    subs = scene.subjects
    if include_colors is None:
        include_colors = [True] * len(subs)
    sks_of = sks_of or {}

    def noun_phrase(i):
        out = ["a"]
        if include_colors[i]:
            out.append(COLORS[subs[i].color])
        out.append(GLYPHS[subs[i].glyph])
        if i in sks_of:
            out.append(sks_of[i])
        return out

    if not subs:
        return ["the", TEXTURES[scene.texture]]
    if len(subs) == 1:
        toks = noun_phrase(0) + [ACTIONS[subs[0].action]]
        return toks + ["in", "the", TEXTURES[scene.texture]]
    if len(subs) == 2:
        rel = scene.relation or REL_WITH
        return (noun_phrase(0) + [rel] + noun_phrase(1)
                + ["in", "the", TEXTURES[scene.texture]])
    raise ValueError("captions cover at most two subjects")


def encode_caption(tokens):
    """Word list -> (TEXT_LEN,) int ids, PAD-filled."""
    if len(tokens) > TEXT_LEN:
        raise ValueError(f"caption too long: {tokens}")
    ids = np.full(TEXT_LEN, TEXT_PAD, dtype=np.int64)
    for i, w in enumerate(tokens):
        ids[i] = WORD_TO_ID[w]
    return ids


def null_caption():
    ids = np.full(TEXT_LEN, TEXT_PAD, dtype=np.int64)
    ids[0] = NULL_TOKEN
    return ids


def decode_caption(ids):
    out = []
    for i in ids:
        if i == TEXT_PAD:
            continue
        out.append("<null>" if i == NULL_TOKEN else WORDS[int(i)])
    return out


# scene generators

def _sample_static_pair_layout(rng, rel):
    """Anchors (a, b) for a static relation, on-grid and non-overlapping."""
    for _ in range(200):
        br = int(rng.integers(0, ANCHOR_ROWS))
        bc = int(rng.integers(0, ANCHOR_COLS))
        if rel == REL_UNDER:
            ar, ac = br + 2, bc
        elif rel == REL_BESIDE:
            ar, ac = br, bc + 2 if rng.random() < 0.5 else bc - 2
            ac = bc + 2 if ac < 0 else ac
        else:  # with: touching diagonally or orthogonally
            dr = int(rng.integers(-1, 2)) * 2
            dc = int(rng.integers(-1, 2)) * 2
            if dr == 0 and dc == 0:
                dc = 2
            ar, ac = br + dr, bc + dc
        if 0 <= ar < ANCHOR_ROWS and 0 <= ac < ANCHOR_COLS:
            return (ar, ac), (br, bc)
    raise RuntimeError("could not lay out static relation")


def _sample_towards_layout(rng, frames, t0):
    """Mover start and target with enough separation to approach visibly."""
    for _ in range(500):
        br = int(rng.integers(0, ANCHOR_ROWS))
        bc = int(rng.integers(0, ANCHOR_COLS))
        ar = int(rng.integers(0, ANCHOR_ROWS))
        ac = int(rng.integers(0, ANCHOR_COLS))
        d = max(abs(ar - br), abs(ac - bc))
        if d >= 4:
            return (ar, ac), (br, bc)
    raise RuntimeError("could not lay out towards relation")


def two_seen_pairs(rng):
    i, j = rng.choice(len(SEEN_PAIRS), size=2, replace=False)
    return SEEN_PAIRS[int(i)], SEEN_PAIRS[int(j)]


def generate_pretrain_scene(rng, frames=11):
    """One corpus scene: 70% single subject+action, 20% subject pair with a
    relation, 10% pure background. Only seen textures/actions/pairs."""
    u = rng.random()
    texture = int(rng.choice(SEEN_TEXTURES))
    t0 = int(rng.integers(0, 8))
    if u < 0.10:
        return Scene(texture=texture, t0=t0, frames=frames)
    if u < 0.80:
        action = int(rng.choice(SEEN_ACTIONS))
        starts = valid_starts(action, frames, t0)
        if not starts:
            action = 0
            starts = valid_starts(action, frames, t0)
        g, c = SEEN_PAIRS[int(rng.integers(0, len(SEEN_PAIRS)))]
        start = starts[int(rng.integers(0, len(starts)))]
        sub = Subject(glyph=g, color=c, action=action, start=start)
        return Scene(texture=texture, subjects=(sub,), t0=t0, frames=frames)
    rel = PAIR_RELATIONS[int(rng.integers(0, len(PAIR_RELATIONS)))]
    (g1, c1), (g2, c2) = two_seen_pairs(rng)
    if rel == REL_TOWARDS:
        (a, b) = _sample_towards_layout(rng, frames, t0)
        mover = Subject(glyph=g1, color=c1, action=0, start=a)
        target = Subject(glyph=g2, color=c2, action=0, start=b)
        # approach runs on the scene clock so phase offsets stay consistent
        return Scene(texture=texture, subjects=(mover, target), relation=rel,
                     approach=Approach(start=a, target=b), t0=0, frames=frames)
    a, b = _sample_static_pair_layout(rng, rel)
    s1 = Subject(glyph=g1, color=c1, action=0, start=a)
    s2 = Subject(glyph=g2, color=c2, action=0, start=b)
    return Scene(texture=texture, subjects=(s1, s2), relation=rel, t0=t0,
                 frames=frames)


def caption_for_pretrain(scene, rng):
    """Corpus caption; drops each subject's color word 15% of the time so
    colorless noun phrases stay in distribution."""
    inc = [rng.random() >= 0.15 for _ in scene.subjects]
    return caption_tokens(scene, include_colors=inc)


def generate_corpus(seed, count, frames=11):
    """Deterministic corpus: list of (scene, caption token list)."""
    out = []
    for i in range(count):
        rng = make_rng(seed, "scene", i)
        scene = generate_pretrain_scene(rng, frames=frames)
        out.append((scene, caption_for_pretrain(scene, rng)))
    return out
