// Line-delimited JSON worker for pipeline tuning sessions.
//
// The tuner drives this process over stdin/stdout: one hello, then a
// strict request/response sequence of run_step frames, then shutdown.
// Intermediate results live in an in-memory handle table; the tuner
// refers back to them by id when it reuses a shared prefix.
//
// Usage: node worker.js [--metrics-log <path>]
//
// With --metrics-log, every terminal metric is appended to <path> as
// a JSON line, so a session can be audited against the tuner's trace.

import { appendFileSync } from "node:fs";
import * as readline from "node:readline";

import { applyClassifier, applyTransform, loadSplit, stageOf, STAGES, Split } from "./pipeline";

const PROTOCOL_VERSION = 1;

interface StageData {
  depth: number;
  split: Split;
}

function writeFrame(frame: Record<string, unknown>): void {
  process.stdout.write(JSON.stringify(frame) + "\n");
}

function fatal(message: string): never {
  console.error(`worker: ${message}`);
  process.exit(1);
}

function parseArgs(argv: string[]): { metricsLog: string | null } {
  let metricsLog: string | null = null;
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === "--metrics-log") {
      if (i + 1 >= argv.length) fatal("--metrics-log needs a path");
      metricsLog = argv[++i];
    } else {
      fatal(`unknown argument: ${argv[i]}`);
    }
  }
  return { metricsLog };
}

export class Worker {
  private handles = new Map<string, StageData>();
  private nextToken = 0;

  constructor(private metricsLog: string | null = null) {
    this.handles.set("input", { depth: 0, split: loadSplit() });
  }

  handleFrame(frame: Record<string, unknown>): boolean {
    switch (frame.type) {
      case "hello":
        if (frame.version !== PROTOCOL_VERSION) {
          fatal(`unsupported protocol version: ${frame.version}`);
        }
        writeFrame({ type: "hello_ok", version: PROTOCOL_VERSION, time_mode: "wall" });
        return true;
      case "run_step":
        this.runStep(frame);
        return true;
      case "shutdown":
        return false;
      default:
        fatal(`unrecognized frame type: ${frame.type}`);
    }
  }

  private runStep(frame: Record<string, unknown>): void {
    const reqId = frame.req_id;
    const step = frame.step;
    const algorithm = frame.algorithm;
    const inputHandle = frame.input_handle;
    const params = frame.hyperparams;
    if (
      typeof reqId !== "number" ||
      typeof step !== "number" ||
      typeof algorithm !== "string" ||
      typeof inputHandle !== "string" ||
      typeof frame.is_last !== "boolean" ||
      typeof params !== "object" ||
      params === null
    ) {
      fatal(`malformed run_step frame: ${JSON.stringify(frame)}`);
    }
    const isLast = frame.is_last;
    const refuse = (message: string): void => {
      writeFrame({ type: "step_err", req_id: reqId, message });
    };

    const stage = stageOf(algorithm);
    if (stage === 0) {
      refuse(`unknown algorithm: ${algorithm}`);
      return;
    }
    if (stage !== step) {
      refuse(`${algorithm} belongs to step ${stage}, not ${step}`);
      return;
    }
    if (isLast !== (stage === STAGES.length)) {
      refuse(`is_last must mark exactly step ${STAGES.length}`);
      return;
    }
    const input = this.handles.get(inputHandle);
    if (input === undefined) {
      refuse(`unknown input handle: ${inputHandle}`);
      return;
    }
    if (input.depth !== step - 1) {
      refuse(`handle ${inputHandle} holds step ${input.depth} output, step ${step} needs ${step - 1}`);
      return;
    }

    const started = process.hrtime.bigint();
    let split = input.split;
    let metric: number | null = null;
    try {
      if (isLast) {
        metric = applyClassifier(algorithm, split, params as Record<string, unknown>);
      } else {
        split = applyTransform(algorithm, split, params as Record<string, unknown>);
      }
    } catch (err) {
      refuse(err instanceof Error ? err.message : String(err));
      return;
    }
    const seconds = Number(process.hrtime.bigint() - started) / 1e9;

    const token = `t${++this.nextToken}`;
    this.handles.set(token, { depth: step, split });
    const reply: Record<string, unknown> = {
      type: "step_ok",
      req_id: reqId,
      output_handle: token,
      seconds,
    };
    if (isLast) {
      reply.metric = metric;
      if (this.metricsLog !== null) {
        appendFileSync(this.metricsLog, JSON.stringify({ req_id: reqId, metric }) + "\n");
      }
    }
    writeFrame(reply);
  }
}

export function serve(metricsLog: string | null): void {
  const worker = new Worker(metricsLog);
  const rl = readline.createInterface({ input: process.stdin, terminal: false });
  rl.on("line", (line) => {
    if (line.trim() === "") return;
    let frame: unknown;
    try {
      frame = JSON.parse(line);
    } catch {
      fatal(`frame is not valid JSON: ${line}`);
    }
    if (typeof frame !== "object" || frame === null || Array.isArray(frame)) {
      fatal(`frame is not an object: ${line}`);
    }
    if (!worker.handleFrame(frame as Record<string, unknown>)) {
      rl.close();
      process.exit(0);
    }
  });
}

if (require.main === module) {
  const { metricsLog } = parseArgs(process.argv.slice(2));
  serve(metricsLog);
}
