import { ChildProcess, spawn } from "node:child_process";
import * as readline from "node:readline";

export const OK = 0;
export const BAD_HANDLE = 1;
export const BAD_ARGUMENT = 2;
export const INTERNAL = 3;

export interface Response {
  id: number;
  status: number;
  out: unknown[];
  error?: string;
}

export class BridgeError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "BridgeError";
  }
}

/** Tags byte payloads for the JSON wire format. */
function encodeArg(value: unknown): unknown {
  if (value instanceof Uint8Array) {
    return { b64: Buffer.from(value).toString("base64") };
  }
  if (Array.isArray(value)) {
    return value.map(encodeArg);
  }
  return value;
}

function decodeOut(value: unknown): unknown {
  if (Array.isArray(value)) {
    return value.map(decodeOut);
  }
  if (value !== null && typeof value === "object") {
    const keys = Object.keys(value as object);
    if (keys.length === 1 && keys[0] === "b64") {
      return new Uint8Array(
        Buffer.from((value as { b64: string }).b64, "base64"),
      );
    }
  }
  return value;
}

/** One bridge subprocess speaking line-delimited JSON on stdio. */
export class Bridge {
  private proc: ChildProcess;
  private nextId = 1;
  private pending = new Map<
    number,
    { resolve: (r: Response) => void; reject: (e: Error) => void }
  >();
  private closed = false;

  constructor(pythonBin = "python3") {
    this.proc = spawn(pythonBin, ["-m", "minigraph.bridge"], {
      stdio: ["pipe", "pipe", "inherit"],
    });
    const rl = readline.createInterface({ input: this.proc.stdout! });
    rl.on("line", (line) => {
      const resp = JSON.parse(line) as Response;
      const waiter = this.pending.get(resp.id);
      if (waiter) {
        this.pending.delete(resp.id);
        resp.out = (decodeOut(resp.out ?? []) as unknown[]) ?? [];
        waiter.resolve(resp);
      }
    });
    this.proc.on("exit", () => {
      for (const waiter of this.pending.values()) {
        waiter.reject(new Error("bridge process exited"));
      }
      this.pending.clear();
    });
  }

  /** Raw call: resolves with the full response, whatever the status. */
  call(fn: string, args: unknown[] = []): Promise<Response> {
    if (this.closed) {
      return Promise.reject(new Error("bridge already closed"));
    }
    const id = this.nextId++;
    const line =
      JSON.stringify({ id, fn, args: args.map(encodeArg) }) + "\n";
    return new Promise((resolve, reject) => {
      this.pending.set(id, { resolve, reject });
      this.proc.stdin!.write(line);
    });
  }

  /** Call that throws a BridgeError on any nonzero status. */
  async invoke(fn: string, args: unknown[] = []): Promise<unknown[]> {
    const resp = await this.call(fn, args);
    if (resp.status !== OK) {
      throw new BridgeError(resp.status, resp.error ?? `status ${resp.status}`);
    }
    return resp.out;
  }

  async close(): Promise<void> {
    if (this.closed) return;
    this.closed = true;
    const exited = new Promise<void>((resolve) => {
      this.proc.once("exit", () => resolve());
    });
    this.proc.stdin!.write(JSON.stringify({ id: 0, fn: "shutdown" }) + "\n");
    this.proc.stdin!.end();
    await exited;
  }
}
