"""Simulated machine substrate.

A Machine owns a set of named execution contexts (one thread each):

  * one per processor,
  * one per copy channel (an ordered pair of memories),
  * one per device stream (created on demand).

Memories are plain byte buffers with a bump allocator.  Devices consume
streams of simulated kernels; a kernel "runs" by advancing wall time for
its declared duration on the stream's thread, so run-ahead behavior is
directly measurable without hardware.

Cross-context message delivery can be artificially delayed via
``MachineSpec.host_message_latency`` to make messaging costs visible at
desk scale.  Delivery is handled by a single timer thread that never
delivers early.
"""

from __future__ import annotations

import heapq
import itertools
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import AllocationError, ResourceError

ProcessorId = int
MemoryId = int

_tls = threading.local()

_STOP = object()


def current_context() -> Optional["Context"]:
    """The execution context running the calling thread, or None for host threads."""
    return getattr(_tls, "ctx", None)


def precise_sleep(duration: float) -> None:
    """Sleep for ``duration`` seconds, never waking early.

    Uses time.sleep for the bulk of the interval (releasing the GIL so
    concurrent contexts make progress) and a short spin for the tail.
    """
    if duration <= 0:
        return
    deadline = time.perf_counter() + duration
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return
        if remaining > 0.001:
            time.sleep(remaining - 0.0005)
        elif remaining > 0.0002:
            time.sleep(0.0001)
        # else: spin out the last couple hundred microseconds


@dataclass(frozen=True)
class MachineSpec:
    processor_count: int
    memory_count: int = 1
    device_count: int = 0
    device_kernel_overhead: float = 0.0
    host_message_latency: float = 0.0
    memory_size: int = 1 << 24
    copy_byte_cost: float = 0.0

    def validate(self) -> None:
        if self.processor_count < 1:
            raise ResourceError("machine needs at least one processor")
        if self.memory_count < 0 or self.device_count < 0:
            raise ResourceError("memory_count and device_count must be non-negative")
        for name in ("device_kernel_overhead", "host_message_latency", "copy_byte_cost"):
            if getattr(self, name) < 0:
                raise ResourceError(f"{name} must be non-negative")
        if self.memory_size < 0:
            raise ResourceError("memory_size must be non-negative")


@dataclass(frozen=True)
class Allocation:
    memory: MemoryId
    offset: int
    size: int


ChannelId = tuple  # (src MemoryId, dst MemoryId)


class Context:
    """A dedicated thread consuming a FIFO of thunks."""

    def __init__(self, machine: "Machine", name: str, kind: str, index):
        self.machine = machine
        self.name = name
        self.kind = kind  # "proc" | "channel"
        self.index = index
        self.inbox: queue.SimpleQueue = queue.SimpleQueue()
        self.thread = threading.Thread(target=self._run, name=name, daemon=True)

    def post(self, fn: Callable[[], None]) -> None:
        self.inbox.put(fn)

    def _run(self) -> None:
        _tls.ctx = self
        while True:
            fn = self.inbox.get()
            if fn is _STOP:
                return
            try:
                fn()
            except Exception as exc:  # noqa: BLE001 - context must survive
                self.machine.record_context_error(self, exc)

    def __repr__(self):
        return f"<Context {self.name}>"


class Memory:
    """A byte buffer with a bump allocator (free happens at machine teardown)."""

    def __init__(self, mid: MemoryId, size: int):
        self.id = mid
        self.buf = bytearray(size)
        self._lock = threading.Lock()
        self._next = 0

    def allocate(self, size: int) -> Allocation:
        if size < 0:
            raise AllocationError("allocation size must be non-negative")
        with self._lock:
            offset = self._next
            if offset + size > len(self.buf):
                raise AllocationError(
                    f"memory M{self.id}: out of space "
                    f"(requested {size}, free {len(self.buf) - offset})"
                )
            # keep 8-byte alignment so fixed-width counters never straddle words
            self._next = offset + ((size + 7) & ~7)
        return Allocation(self.id, offset, size)

    def read(self, alloc: Allocation) -> bytes:
        return bytes(self.buf[alloc.offset : alloc.offset + alloc.size])

    def write(self, alloc: Allocation, data: bytes) -> None:
        if len(data) != alloc.size:
            raise AllocationError("write size does not match allocation size")
        self.buf[alloc.offset : alloc.offset + alloc.size] = data


class _Delayer:
    """Single timer thread delivering callbacks at (not before) their due time."""

    def __init__(self):
        self._heap = []
        self._seq = itertools.count()
        self._cond = threading.Condition()
        self._stopped = False
        self.thread = threading.Thread(target=self._run, name="delayer", daemon=True)
        self.thread.start()

    def schedule(self, delay: float, fn: Callable[[], None]) -> None:
        due = time.perf_counter() + delay
        with self._cond:
            heapq.heappush(self._heap, (due, next(self._seq), fn))
            self._cond.notify()

    def stop(self) -> None:
        with self._cond:
            self._stopped = True
            self._cond.notify()

    def _run(self) -> None:
        while True:
            with self._cond:
                while not self._heap and not self._stopped:
                    self._cond.wait()
                if self._stopped and not self._heap:
                    return
                due, _, fn = self._heap[0]
                now = time.perf_counter()
                if now < due:
                    self._cond.wait(due - now)
                    continue
                heapq.heappop(self._heap)
            try:
                fn()
            except Exception:  # noqa: BLE001 - delivery must continue
                pass


class DeviceEvent:
    """One-shot completion token recorded at a point in a device stream."""

    __slots__ = ("device", "_flag", "_callbacks", "_lock")

    def __init__(self, device: "Device"):
        self.device = device
        self._flag = threading.Event()
        self._callbacks = []
        self._lock = threading.Lock()

    @property
    def complete(self) -> bool:
        return self._flag.is_set()

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._flag.wait(timeout)

    def on_complete(self, fn: Callable[[], None]) -> None:
        with self._lock:
            if not self._flag.is_set():
                self._callbacks.append(fn)
                return
        fn()

    def _trigger(self) -> None:
        with self._lock:
            self._flag.set()
            callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn()


@dataclass(frozen=True)
class KernelDesc:
    """A simulated kernel: a name, a duration, and an optional host-visible effect."""

    name: str
    duration: float
    fn: Optional[Callable[[], None]] = None


class DeviceStream:
    """FIFO of kernels consumed by a dedicated thread; kernels complete in order."""

    def __init__(self, device: "Device", sid: int):
        self.device = device
        self.sid = sid
        self._inbox: queue.SimpleQueue = queue.SimpleQueue()
        self.thread = threading.Thread(
            target=self._run, name=f"D{device.id}.S{sid}", daemon=True
        )
        self.thread.start()

    def _run(self) -> None:
        overhead = self.device.kernel_overhead
        while True:
            item = self._inbox.get()
            if item is _STOP:
                return
            kernel, waits, ev = item
            for w in waits:
                w._flag.wait()
            start = time.perf_counter()
            precise_sleep(kernel.duration + overhead)
            if kernel.fn is not None:
                try:
                    kernel.fn()
                except Exception as exc:  # noqa: BLE001
                    self.device.machine.record_context_error(self, exc)
            end = time.perf_counter()
            self.device.record(self.sid, kernel.name, start, end)
            ev._trigger()

    def enqueue(self, kernel: KernelDesc, waits=()) -> DeviceEvent:
        ev = DeviceEvent(self.device)
        self._inbox.put((kernel, tuple(waits), ev))
        return ev


class Device:
    """A simulated asynchronous device hosting any number of streams."""

    def __init__(self, machine: "Machine", did: int, kernel_overhead: float):
        self.machine = machine
        self.id = did
        self.kernel_overhead = kernel_overhead
        self.streams = []
        self._timeline = []
        self._lock = threading.Lock()

    def create_stream(self) -> DeviceStream:
        with self._lock:
            stream = DeviceStream(self, len(self.streams))
            self.streams.append(stream)
        return stream

    def record(self, sid: int, name: str, start: float, end: float) -> None:
        with self._lock:
            self._timeline.append((sid, name, start, end))

    def timeline(self):
        with self._lock:
            return list(self._timeline)


class Machine:
    """Processors, memories, copy channels and devices, all backed by threads."""

    def __init__(self, spec: MachineSpec):
        spec.validate()
        self.spec = spec
        self.procs = [
            Context(self, f"P{i}", "proc", i) for i in range(spec.processor_count)
        ]
        self.memories = [Memory(i, spec.memory_size) for i in range(spec.memory_count)]
        self.channels = {}
        for src in range(spec.memory_count):
            for dst in range(spec.memory_count):
                self.channels[(src, dst)] = Context(
                    self, f"C{src}-{dst}", "channel", (src, dst)
                )
        self.devices = [
            Device(self, i, spec.device_kernel_overhead)
            for i in range(spec.device_count)
        ]
        self._delayer = _Delayer()
        self._errors = []
        self._errors_lock = threading.Lock()
        self._blocking_waits = 0
        self._shut_down = False
        for ctx in self.contexts():
            ctx.thread.start()

    # -- topology ---------------------------------------------------------

    def contexts(self):
        yield from self.procs
        yield from self.channels.values()

    def processor(self, pid: ProcessorId) -> Context:
        try:
            return self.procs[pid]
        except (IndexError, TypeError):
            raise ResourceError(f"unknown processor {pid!r}") from None

    def memory(self, mid: MemoryId) -> Memory:
        try:
            return self.memories[mid]
        except (IndexError, TypeError):
            raise ResourceError(f"unknown memory {mid!r}") from None

    def channel(self, src: MemoryId, dst: MemoryId) -> Context:
        try:
            return self.channels[(src, dst)]
        except KeyError:
            raise ResourceError(f"unknown channel {src}->{dst}") from None

    def device_for(self, pid: ProcessorId) -> Optional[Device]:
        if not self.devices:
            return None
        return self.devices[pid % len(self.devices)]

    # -- messaging --------------------------------------------------------

    def deliver(self, ctx: Context, fn: Callable[[], None]) -> None:
        """Deliver ``fn`` to ``ctx``, applying the injected latency when the
        sender runs on a different context (or on a host thread)."""
        latency = self.spec.host_message_latency
        if latency > 0 and current_context() is not ctx:
            self._delayer.schedule(latency, lambda: ctx.post(fn))
        else:
            ctx.post(fn)

    def deliver_host(self, fn: Callable[[], None]) -> None:
        """Deliver a device-to-host notification, applying the injected latency.

        The callback runs on the timer thread; callers that need a specific
        context post into it from the callback."""
        latency = self.spec.host_message_latency
        if latency > 0:
            self._delayer.schedule(latency, fn)
        else:
            fn()

    # -- memory / copies --------------------------------------------------

    def allocate(self, mid: MemoryId, size: int) -> Allocation:
        return self.memory(mid).allocate(size)

    def read(self, alloc: Allocation) -> bytes:
        return self.memory(alloc.memory).read(alloc)

    def write(self, alloc: Allocation, data: bytes) -> None:
        self.memory(alloc.memory).write(alloc, data)

    def memory_image(self) -> list:
        """Snapshot of every memory's allocated prefix (for state comparisons)."""
        return [bytes(m.buf[: m._next]) for m in self.memories]

    def perform_copy(self, src: Allocation, dst: Allocation) -> None:
        """The actual memmove; meant to run on the (src, dst) channel context."""
        if src.size != dst.size:
            raise AllocationError("copy size mismatch")
        data = self.memory(src.memory).read(src)
        self.memory(dst.memory).write(dst, data)
        if self.spec.copy_byte_cost > 0:
            precise_sleep(src.size * self.spec.copy_byte_cost)

    # -- devices ----------------------------------------------------------

    def stream_enqueue(self, stream: DeviceStream, kernel: KernelDesc, waits=()) -> DeviceEvent:
        if stream.device.machine is not self:
            raise ResourceError("stream belongs to a different machine")
        for w in waits:
            if w.device.machine is not self:
                raise ResourceError("wait event belongs to a different machine")
        return stream.enqueue(kernel, waits)

    def notify_host(self, ev: DeviceEvent, sink: Callable[[], None]) -> None:
        """Invoke ``sink`` exactly once after ``ev`` completes, paying the
        cross-context message latency."""
        ev.on_complete(lambda: self.deliver_host(sink))

    def record_blocking_wait(self) -> None:
        with self._errors_lock:
            self._blocking_waits += 1

    @property
    def blocking_device_waits(self) -> int:
        with self._errors_lock:
            return self._blocking_waits

    # -- error plumbing ---------------------------------------------------

    def record_context_error(self, ctx, exc: Exception) -> None:
        with self._errors_lock:
            self._errors.append((ctx, exc))

    def context_errors(self):
        with self._errors_lock:
            return list(self._errors)

    # -- lifecycle --------------------------------------------------------

    def shutdown(self) -> None:
        if self._shut_down:
            return
        self._shut_down = True
        for ctx in self.contexts():
            ctx.inbox.put(_STOP)
        for dev in self.devices:
            for stream in dev.streams:
                stream._inbox.put(_STOP)
        self._delayer.stop()
        for ctx in self.contexts():
            ctx.thread.join(timeout=5)

    def __enter__(self) -> "Machine":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def create_machine(spec: MachineSpec) -> Machine:
    return Machine(spec)
