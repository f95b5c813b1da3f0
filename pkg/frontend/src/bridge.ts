/**
 * Synchronous JSON-lines bridge to a `lesionkit serve` child process.
 *
 * The child is owned by a worker thread; the calling thread posts a request
 * and blocks on Atomics.wait until the worker copies the response line into
 * a SharedArrayBuffer. This makes every call synchronous, which is what
 * custom-gradient hooks in training frameworks require.
 */

import { Worker } from "node:worker_threads";
import { fileURLToPath } from "node:url";

export interface BridgeOptions {
  /** Backend command; defaults to the installed `lesionkit` entry point. */
  cmd?: string;
  args?: string[];
  /** Response capacity; responses larger than this fail with code "overflow". */
  capacityBytes?: number;
  /** Per-call timeout. */
  timeoutMs?: number;
  /** Timeout for the initial ping (covers interpreter startup). */
  startupTimeoutMs?: number;
}

interface RawResponse {
  id?: number;
  ok: boolean;
  code?: string;
  error?: string;
  [key: string]: unknown;
}

export class BridgeError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "BridgeError";
  }
}

export class SyncBridge {
  private readonly worker: Worker;
  private readonly signal: Int32Array;
  private readonly payload: Uint8Array;
  private readonly timeoutMs: number;
  private nextId = 1;
  private closed = false;
  readonly serverVersion: string;

  constructor(options: BridgeOptions = {}) {
    const capacity = options.capacityBytes ?? 32 * 1024 * 1024;
    const sab = new SharedArrayBuffer(8 + capacity);
    this.signal = new Int32Array(sab, 0, 2);
    this.payload = new Uint8Array(sab, 8);
    Atomics.store(this.signal, 0, -1);
    this.timeoutMs = options.timeoutMs ?? 30_000;

    const workerPath = fileURLToPath(new URL("./bridge-worker.cjs", import.meta.url));
    this.worker = new Worker(workerPath, {
      workerData: {
        sab,
        cmd: options.cmd ?? process.env.LESIONKIT_CMD ?? "lesionkit",
        args: options.args ?? ["serve"],
      },
    });
    this.worker.unref();

    const hello = this.call(
      { op: "ping" },
      options.startupTimeoutMs ?? 60_000,
    ) as { version?: string };
    this.serverVersion = hello.version ?? "unknown";
  }

  /** Round-trip one request object; throws BridgeError on transport failure. */
  call(request: Record<string, unknown>, timeoutMs?: number): RawResponse {
    const req = { id: this.nextId++, ...request };
    return this.roundTrip(
      () => this.worker.postMessage({ type: "request", line: JSON.stringify(req) }),
      timeoutMs ?? this.timeoutMs,
    );
  }

  /** PID of the backend process (for resource monitoring). */
  backendPid(): number {
    const resp = this.roundTrip(
      () => this.worker.postMessage({ type: "pid" }),
      this.timeoutMs,
    ) as { pid?: number };
    if (typeof resp.pid !== "number") {
      throw new BridgeError("backend pid unavailable");
    }
    return resp.pid;
  }

  private roundTrip(post: () => void, timeoutMs: number): RawResponse {
    if (this.closed) {
      throw new BridgeError("bridge is closed");
    }
    Atomics.store(this.signal, 0, 0);
    post();
    const outcome = Atomics.wait(this.signal, 0, 0, timeoutMs);
    if (outcome === "timed-out") {
      Atomics.store(this.signal, 0, -1);
      throw new BridgeError(`backend did not answer within ${timeoutMs} ms`);
    }
    const length = Atomics.load(this.signal, 1);
    const text = Buffer.from(this.payload.subarray(0, length)).toString("utf8");
    Atomics.store(this.signal, 0, -1);
    return JSON.parse(text) as RawResponse;
  }

  close(): void {
    if (this.closed) {
      return;
    }
    try {
      this.call({ op: "shutdown" }, 2_000);
    } catch {
      /* backend may already be gone */
    }
    this.closed = true;
    this.worker.postMessage({ type: "close" });
    void this.worker.terminate();
  }
}
