// Three-stage iris pipeline: rescale the features, pick a feature
// subset, then classify.  Every stage is a pure function of its
// input and hyperparameters, so a configuration always earns the
// same validation error.

import { CLASS_COUNT, IRIS } from "./dataset";

export interface Dataset {
  features: number[][];
  labels: number[];
}

export interface Split {
  train: Dataset;
  valid: Dataset;
}

// Fixed split seed: the whole point of the demo is that repeated
// tuning sessions score configurations against the same held-out rows.
export const SPLIT_SEED = 9;

export const VALID_FRACTION = 0.3;

export type Hyperparams = Record<string, unknown>;

export const STAGES: ReadonlyArray<readonly string[]> = [
  ["standardize", "minmax", "raw"],
  ["top_variance", "all_features"],
  ["knn", "centroid", "logreg"],
];

function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export function loadSplit(seed: number = SPLIT_SEED): Split {
  const next = mulberry32(seed);
  const order = IRIS.map((_, i) => i);
  for (let i = order.length - 1; i > 0; i--) {
    const j = Math.floor(next() * (i + 1));
    [order[i], order[j]] = [order[j], order[i]];
  }
  const nValid = Math.round(IRIS.length * VALID_FRACTION);
  const pick = (indices: number[]): Dataset => ({
    features: indices.map((i) => IRIS[i].slice(0, 4) as number[]),
    labels: indices.map((i) => IRIS[i][4]),
  });
  return {
    train: pick(order.slice(nValid)),
    valid: pick(order.slice(0, nValid)),
  };
}

function columnStats(rows: number[][]): { mean: number[]; sd: number[]; min: number[]; max: number[] } {
  const d = rows[0].length;
  const mean = new Array(d).fill(0);
  const min = rows[0].slice();
  const max = rows[0].slice();
  for (const row of rows) {
    for (let j = 0; j < d; j++) {
      mean[j] += row[j];
      if (row[j] < min[j]) min[j] = row[j];
      if (row[j] > max[j]) max[j] = row[j];
    }
  }
  for (let j = 0; j < d; j++) mean[j] /= rows.length;
  const sd = new Array(d).fill(0);
  for (const row of rows) {
    for (let j = 0; j < d; j++) sd[j] += (row[j] - mean[j]) ** 2;
  }
  for (let j = 0; j < d; j++) sd[j] = Math.sqrt(sd[j] / rows.length);
  return { mean, sd, min, max };
}

function mapFeatures(split: Split, fn: (row: number[]) => number[]): Split {
  return {
    train: { features: split.train.features.map(fn), labels: split.train.labels },
    valid: { features: split.valid.features.map(fn), labels: split.valid.labels },
  };
}

// Stage 1.  Scaling parameters come from the training rows only; the
// validation rows just get mapped through them.

export function standardize(split: Split): Split {
  const { mean, sd } = columnStats(split.train.features);
  return mapFeatures(split, (row) =>
    row.map((v, j) => (sd[j] > 0 ? (v - mean[j]) / sd[j] : 0)),
  );
}

export function minmax(split: Split): Split {
  const { min, max } = columnStats(split.train.features);
  return mapFeatures(split, (row) =>
    row.map((v, j) => (max[j] > min[j] ? (v - min[j]) / (max[j] - min[j]) : 0)),
  );
}

// Stage 2.

export function topVariance(split: Split, k: number): Split {
  const d = split.train.features[0].length;
  const kept = Math.max(1, Math.min(Math.round(k), d));
  const { mean } = columnStats(split.train.features);
  const variance = new Array(d).fill(0);
  for (const row of split.train.features) {
    for (let j = 0; j < d; j++) variance[j] += (row[j] - mean[j]) ** 2;
  }
  const ranked = variance
    .map((v, j) => ({ v, j }))
    .sort((a, b) => b.v - a.v || a.j - b.j)
    .slice(0, kept)
    .map((e) => e.j)
    .sort((a, b) => a - b);
  return mapFeatures(split, (row) => ranked.map((j) => row[j]));
}

// Stage 3.  Each classifier fits on the training rows and returns the
// fraction of validation rows it gets wrong.

function errorRate(predicted: number[], labels: number[]): number {
  let wrong = 0;
  for (let i = 0; i < labels.length; i++) {
    if (predicted[i] !== labels[i]) wrong++;
  }
  return wrong / labels.length;
}

function argminLabel(scores: number[]): number {
  let best = 0;
  for (let c = 1; c < scores.length; c++) {
    if (scores[c] < scores[best]) best = c;
  }
  return best;
}

export function knn(split: Split, k: number): number {
  const { train, valid } = split;
  const neighbors = Math.max(1, Math.min(Math.round(k), train.features.length));
  const predicted = valid.features.map((row) => {
    const byDistance = train.features
      .map((t, i) => {
        let d2 = 0;
        for (let j = 0; j < row.length; j++) d2 += (row[j] - t[j]) ** 2;
        return { d2, i };
      })
      .sort((a, b) => a.d2 - b.d2 || a.i - b.i);
    const votes = new Array(CLASS_COUNT).fill(0);
    for (let n = 0; n < neighbors; n++) votes[train.labels[byDistance[n].i]]++;
    return argminLabel(votes.map((v) => -v));
  });
  return errorRate(predicted, valid.labels);
}

export function nearestCentroid(split: Split): number {
  const { train, valid } = split;
  const d = train.features[0].length;
  const sums = Array.from({ length: CLASS_COUNT }, () => new Array(d).fill(0));
  const counts = new Array(CLASS_COUNT).fill(0);
  for (let i = 0; i < train.features.length; i++) {
    const c = train.labels[i];
    counts[c]++;
    for (let j = 0; j < d; j++) sums[c][j] += train.features[i][j];
  }
  const centroids = sums.map((s, c) => s.map((v) => (counts[c] > 0 ? v / counts[c] : 0)));
  const predicted = valid.features.map((row) =>
    argminLabel(
      centroids.map((centroid) => {
        let d2 = 0;
        for (let j = 0; j < d; j++) d2 += (row[j] - centroid[j]) ** 2;
        return d2;
      }),
    ),
  );
  return errorRate(predicted, valid.labels);
}

export function logreg(split: Split, learningRate: number, epochs: number): number {
  const { train, valid } = split;
  const d = train.features[0].length;
  const rounds = Math.max(1, Math.round(epochs));
  // Softmax regression by full-batch gradient descent from zero
  // weights: no randomness anywhere, so the fit is reproducible.
  const w = Array.from({ length: CLASS_COUNT }, () => new Array(d + 1).fill(0));
  const logits = (row: number[]): number[] =>
    w.map((wc) => {
      let z = wc[d];
      for (let j = 0; j < d; j++) z += wc[j] * row[j];
      return z;
    });
  const softmax = (z: number[]): number[] => {
    const top = Math.max(...z);
    const exp = z.map((v) => Math.exp(v - top));
    const total = exp.reduce((a, b) => a + b, 0);
    return exp.map((v) => v / total);
  };
  const n = train.features.length;
  for (let round = 0; round < rounds; round++) {
    const grad = Array.from({ length: CLASS_COUNT }, () => new Array(d + 1).fill(0));
    for (let i = 0; i < n; i++) {
      const p = softmax(logits(train.features[i]));
      for (let c = 0; c < CLASS_COUNT; c++) {
        const delta = p[c] - (train.labels[i] === c ? 1 : 0);
        for (let j = 0; j < d; j++) grad[c][j] += delta * train.features[i][j];
        grad[c][d] += delta;
      }
    }
    for (let c = 0; c < CLASS_COUNT; c++) {
      for (let j = 0; j <= d; j++) w[c][j] -= (learningRate / n) * grad[c][j];
    }
  }
  const predicted = valid.features.map((row) => argminLabel(softmax(logits(row)).map((p) => -p)));
  return errorRate(predicted, valid.labels);
}

function numberParam(params: Hyperparams, name: string): number {
  const v = params[name];
  if (typeof v !== "number" || !Number.isFinite(v)) {
    throw new Error(`hyperparameter ${name} must be a finite number`);
  }
  return v;
}

export function stageOf(algorithm: string): number {
  for (let s = 0; s < STAGES.length; s++) {
    if (STAGES[s].includes(algorithm)) return s + 1;
  }
  return 0;
}

// Stages 1 and 2 map a split to a split; stage 3 maps a split to its
// validation error.

export function applyTransform(algorithm: string, split: Split, params: Hyperparams): Split {
  switch (algorithm) {
    case "standardize":
      return standardize(split);
    case "minmax":
      return minmax(split);
    case "raw":
      return split;
    case "top_variance":
      return topVariance(split, numberParam(params, "k"));
    case "all_features":
      return split;
    default:
      throw new Error(`unknown transform: ${algorithm}`);
  }
}

export function applyClassifier(algorithm: string, split: Split, params: Hyperparams): number {
  switch (algorithm) {
    case "knn":
      return knn(split, numberParam(params, "k"));
    case "centroid":
      return nearestCentroid(split);
    case "logreg":
      return logreg(split, numberParam(params, "lr"), numberParam(params, "epochs"));
    default:
      throw new Error(`unknown classifier: ${algorithm}`);
  }
}
