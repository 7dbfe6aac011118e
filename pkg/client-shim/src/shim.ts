// Tiny chain-binomial SIR simulator that runs as a probabilistic program
// under an external controller (protocol version 1): every random draw is a
// sample_request answered by the controller, every data point an observe.
// The shim itself never touches a random number generator, so its message
// sequence is a pure function of the controller's responses.
//
// Usage: node dist/shim.js --connect host:port

import * as net from 'net';
import { encodeFrame, FrameBuffer, FramingError, WireMessage } from './framing';

export const PROTOCOL_VERSION = 1;
export const CLIENT_NAME = 'tiny-sir-shim';

export class ProtocolFailure extends Error {
  constructor(public code: string, message: string) {
    super(`[${code}] ${message}`);
  }
}

interface Dist {
  family: string;
  params: Record<string, unknown>;
}

const uniform = (low: number, high: number): Dist => ({ family: 'uniform', params: { low, high } });
const binomial = (n: number, p: number): Dist => ({ family: 'binomial', params: { n, p } });
const poisson = (rate: number): Dist => ({ family: 'poisson', params: { rate } });

interface SirParams {
  population: number;
  initialInfected: number;
  horizonDays: number;
  dt: number;
  betaPrior: Dist;
  gammaPrior: Dist;
  data: Map<number, number>;
}

export function parseRunConfig(config: Record<string, unknown>): SirParams {
  const population = requirePositiveInt(config, 'population');
  const initialInfected = requirePositiveInt(config, 'initial_infected');
  const horizonDays = requireInt(config, 'horizon_days', 0);
  const dt = typeof config.dt === 'number' ? config.dt : 1.0;
  if (initialInfected > population) {
    throw new ProtocolFailure('invalid_field', 'initial_infected exceeds population');
  }

  // Priors come from the controller's config so both sides agree on the
  // random-choice vocabulary; fall back to the controller's defaults.
  let betaPrior = uniform(0.05, 1.0);
  let gammaPrior = uniform(0.05, 0.5);
  const priors = config.priors as Record<string, Dist> | undefined;
  if (priors && typeof priors === 'object') {
    if (priors.beta) betaPrior = priors.beta;
    if (priors.gamma) gammaPrior = priors.gamma;
  }

  const data = new Map<number, number>();
  if (Array.isArray(config.data)) {
    for (const item of config.data as Array<Record<string, unknown>>) {
      const day = item.day;
      const count = item.count;
      if (typeof day !== 'number' || typeof count !== 'number') {
        throw new ProtocolFailure('invalid_field', 'data entries need integer day and count');
      }
      data.set(day, count);
    }
  }
  return { population, initialInfected, horizonDays, dt, betaPrior, gammaPrior, data };
}

function requireInt(obj: Record<string, unknown>, key: string, min: number): number {
  const value = obj[key];
  if (typeof value !== 'number' || !Number.isInteger(value) || value < min) {
    throw new ProtocolFailure('invalid_field', `config.${key} must be an integer >= ${min}`);
  }
  return value;
}

function requirePositiveInt(obj: Record<string, unknown>, key: string): number {
  return requireInt(obj, key, 1);
}

/** Promise-based sequential reader over a socket's message stream. */
export class MessageReader {
  private frames = new FrameBuffer();
  private queue: WireMessage[] = [];
  private waiters: Array<{
    resolve: (m: WireMessage | null) => void;
    reject: (e: Error) => void;
  }> = [];
  private done = false;
  private failure: Error | null = null;

  constructor(socket: net.Socket) {
    socket.on('data', (chunk: Buffer) => {
      try {
        this.frames.push(chunk);
        let message: WireMessage | null;
        while ((message = this.frames.next()) !== null) {
          this.queue.push(message);
        }
      } catch (err) {
        this.fail(err instanceof Error ? err : new Error(String(err)));
        socket.destroy();
        return;
      }
      this.drain();
    });
    socket.on('error', (err: Error) => this.fail(err));
    socket.on('close', () => {
      this.done = true;
      this.drain();
    });
  }

  private fail(err: Error): void {
    this.failure = this.failure ?? err;
    this.done = true;
    this.drain();
  }

  private drain(): void {
    while (this.waiters.length > 0) {
      if (this.queue.length > 0) {
        this.waiters.shift()!.resolve(this.queue.shift()!);
      } else if (this.failure !== null) {
        this.waiters.shift()!.reject(this.failure);
      } else if (this.done) {
        this.waiters.shift()!.resolve(null);
      } else {
        break;
      }
    }
  }

  /** Next message; null once the peer has closed the connection cleanly. */
  next(): Promise<WireMessage | null> {
    return new Promise((resolve, reject) => {
      this.waiters.push({ resolve, reject });
      this.drain();
    });
  }
}

export class TinySirShim {
  private reader: MessageReader;

  constructor(private socket: net.Socket, private clientName: string = CLIENT_NAME) {
    this.reader = new MessageReader(socket);
  }

  private send(message: WireMessage): void {
    this.socket.write(encodeFrame(message));
  }

  private async expect(type: string): Promise<WireMessage> {
    const message = await this.reader.next();
    if (message === null) {
      throw new ProtocolFailure('transport', `connection closed while waiting for ${type}`);
    }
    if (message.type === 'error') {
      throw new ProtocolFailure(String(message.code ?? 'error'), String(message.message ?? ''));
    }
    if (message.type !== type) {
      throw new ProtocolFailure('protocol_state', `expected ${type}, got ${message.type}`);
    }
    return message;
  }

  private async sample(label: string, dist: Dist): Promise<unknown> {
    this.send({ type: 'sample_request', label, dist });
    const reply = await this.expect('sample_response');
    return reply.value;
  }

  private async sampleNumber(label: string, dist: Dist): Promise<number> {
    const value = await this.sample(label, dist);
    if (typeof value !== 'number') {
      throw new ProtocolFailure('invalid_field', `sample_response for ${label} is not a number`);
    }
    return value;
  }

  private observe(label: string, dist: Dist, value: number): void {
    this.send({ type: 'observe', label, dist, value });
  }

  /** One SIR execution: every draw served by the controller. */
  async runOnce(config: Record<string, unknown>): Promise<Record<string, number>> {
    const p = parseRunConfig(config);
    const beta = await this.sampleNumber('beta', p.betaPrior);
    const gamma = await this.sampleNumber('gamma', p.gammaPrior);

    let s = p.population - p.initialInfected;
    let i = p.initialInfected;
    const newInfections: number[] = [0];
    for (let day = 0; day < p.horizonDays; day++) {
      const pInf = -Math.expm1((-beta * i * p.dt) / p.population);
      const newInf = await this.sampleNumber('step_inf', binomial(s, pInf));
      const pRec = -Math.expm1(-gamma * p.dt);
      const recovered = await this.sampleNumber('step_rec', binomial(i, pRec));
      s -= newInf;
      i += newInf - recovered;
      newInfections.push(newInf);
      const t = day + 1;
      if (p.data.has(t)) {
        this.observe('obs', poisson(newInf + 0.1), p.data.get(t)!);
      }
    }

    let totalCases = 0;
    let peakDay = 0;
    let peakHeight = newInfections[0];
    newInfections.forEach((value, index) => {
      totalCases += value;
      if (value > peakHeight) {
        peakHeight = value;
        peakDay = index;
      }
    });
    return { total_cases: totalCases, peak_day: peakDay, peak_height: peakHeight };
  }

  /** Handshake, then serve runs until the controller closes the connection. */
  async serve(): Promise<number> {
    this.send({
      type: 'handshake',
      protocol_version: PROTOCOL_VERSION,
      client_name: this.clientName,
    });
    const ack = await this.expect('handshake_ack');
    if (ack.protocol_version !== PROTOCOL_VERSION) {
      throw new ProtocolFailure('version_mismatch', `controller speaks ${ack.protocol_version}`);
    }

    let served = 0;
    for (;;) {
      const message = await this.reader.next();
      if (message === null) return served; // controller hung up: normal end
      if (message.type === 'error') {
        throw new ProtocolFailure(String(message.code ?? 'error'), String(message.message ?? ''));
      }
      if (message.type !== 'run') {
        this.send({
          type: 'error',
          code: 'protocol_state',
          message: `unexpected ${message.type}`,
        });
        throw new ProtocolFailure('protocol_state', `unexpected ${message.type}`);
      }
      const outputs = await this.runOnce(message.config as Record<string, unknown>);
      this.send({ type: 'run_result', outputs });
      served++;
    }
  }

  /** Best-effort error report before closing (used by the CLI wrapper). */
  reportError(code: string, message: string): void {
    try {
      this.send({ type: 'error', code, message });
    } catch {
      /* connection already gone */
    }
  }
}

export function parseConnectArg(argv: string[]): { host: string; port: number } {
  const index = argv.indexOf('--connect');
  const target = index >= 0 ? argv[index + 1] : undefined;
  if (!target) {
    throw new Error('usage: shim --connect host:port');
  }
  const colon = target.lastIndexOf(':');
  const host = target.slice(0, colon);
  const port = Number(target.slice(colon + 1));
  if (colon <= 0 || !Number.isInteger(port) || port <= 0 || port > 65535) {
    throw new Error(`invalid --connect target: ${target}`);
  }
  return { host, port };
}

function main(): void {
  let target: { host: string; port: number };
  try {
    target = parseConnectArg(process.argv.slice(2));
  } catch (err) {
    console.error(String(err instanceof Error ? err.message : err));
    process.exit(2);
  }

  const socket = net.createConnection(target.port, target.host);
  socket.on('error', (err) => {
    console.error(`connection failed: ${err.message}`);
    process.exitCode = 1;
  });
  socket.once('connect', () => {
    const shim = new TinySirShim(socket);
    shim
      .serve()
      .then((served) => {
        console.error(`served ${served} run(s)`);
        socket.end();
        process.exitCode = 0;
      })
      .catch((err) => {
        if (err instanceof ProtocolFailure) {
          shim.reportError(err.code, err.message);
          console.error(`protocol error: ${err.message}`);
        } else if (err instanceof FramingError) {
          shim.reportError(err.code, err.message);
          console.error(`framing error: ${err.message}`);
        } else {
          console.error(`error: ${err}`);
        }
        socket.destroy();
        process.exitCode = 1;
      });
  });
}

if (require.main === module) {
  main();
}
