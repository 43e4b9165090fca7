#include "cadlab/hil_server.hpp"

#include <atomic>
#include <chrono>
#include <deque>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

namespace cadlab::hil {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct WsClient;

struct Entry {
  std::unique_ptr<Session> session;
  std::vector<std::weak_ptr<WsClient>> clients;
  net::steady_timer tick_timer;
  net::steady_timer pause_timer;
  Clock::time_point next_tick;
  bool ticking = false;
  bool archived = false;

  explicit Entry(net::io_context& io) : tick_timer(io), pause_timer(io) {}
};

std::string strip_query(beast::string_view target) {
  std::string t(target);
  if (auto q = t.find('?'); q != std::string::npos) t.resize(q);
  return t;
}

}  // namespace

struct Server::Impl : std::enable_shared_from_this<Server::Impl> {
  std::shared_ptr<const sim::TrackSpec> track;
  std::shared_ptr<const nn::Policy<float>> policy;
  ServerOptions options;
  net::io_context io{1};
  tcp::acceptor acceptor{io};
  std::optional<net::signal_set> signals;
  std::thread thread;
  std::map<std::string, std::shared_ptr<Entry>> sessions;
  int created = 0;
  std::atomic<int> archived{0};
  bool stopping = false;
  const Clock::time_point origin = Clock::now();

  double now_s() const { return std::chrono::duration<double>(Clock::now() - origin).count(); }

  void accept();
  void stop();
  http::response<http::string_body> handle_http(const http::request<http::string_body>& req);
  std::shared_ptr<Entry> find(const std::string& id) const {
    auto it = sessions.find(id);
    return it == sessions.end() ? nullptr : it->second;
  }
  std::shared_ptr<Entry> create_session(const json& body);

  void attach(const std::shared_ptr<Entry>& e, const std::shared_ptr<WsClient>& c);
  void detach(const std::shared_ptr<Entry>& e, const WsClient* c);
  void handle_message(const std::shared_ptr<Entry>& e, const std::shared_ptr<WsClient>& c,
                      const std::string& text);
  void broadcast(const std::shared_ptr<Entry>& e, const std::vector<json>& frames);
  void start_ticking(const std::shared_ptr<Entry>& e);
  void schedule_tick(const std::shared_ptr<Entry>& e);
  void on_tick(const std::shared_ptr<Entry>& e);
  void archive(const std::shared_ptr<Entry>& e);
};

namespace {

struct WsClient : std::enable_shared_from_this<WsClient> {
  struct Item {
    bool state = false;
    std::string text;
  };

  websocket::stream<beast::tcp_stream> ws;
  beast::flat_buffer buffer;
  std::deque<Item> queue;
  bool writing = false;
  bool closed = false;
  std::shared_ptr<Server::Impl> server;
  std::shared_ptr<Entry> entry;

  WsClient(tcp::socket&& socket, std::shared_ptr<Server::Impl> s, std::shared_ptr<Entry> e)
      : ws(std::move(socket)), server(std::move(s)), entry(std::move(e)) {}

  void run(http::request<http::string_body> req) {
    beast::get_lowest_layer(ws).expires_never();
    ws.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws.async_accept(req, [self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->server->attach(self->entry, self);
      self->send(self->entry->session->welcome_frame().dump(), false);
      self->read();
    });
  }

  void read() {
    ws.async_read(buffer, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->on_closed();
        return;
      }
      std::string text = beast::buffers_to_string(self->buffer.data());
      self->buffer.consume(self->buffer.size());
      self->server->handle_message(self->entry, self, text);
      self->read();
    });
  }

  // Slow consumers drop to the latest state frame.
  void send(std::string text, bool state) {
    if (closed) return;
    const std::size_t first_idle = writing ? 1 : 0;
    if (state && queue.size() > first_idle && queue.back().state) {
      queue.back().text = std::move(text);
      return;
    }
    queue.push_back({state, std::move(text)});
    if (!writing) write();
  }

  void write() {
    writing = true;
    ws.text(true);
    ws.async_write(net::buffer(queue.front().text),
                   [self = shared_from_this()](beast::error_code ec, std::size_t) {
                     self->queue.pop_front();
                     if (ec) {
                       self->writing = false;
                       self->queue.clear();
                       return;
                     }
                     if (self->queue.empty()) {
                       self->writing = false;
                     } else {
                       self->write();
                     }
                   });
  }

  void on_closed() {
    if (closed) return;
    closed = true;
    queue.clear();
    server->detach(entry, this);
  }

  void shutdown() {
    closed = true;
    beast::error_code ec;
    beast::get_lowest_layer(ws).socket().shutdown(tcp::socket::shutdown_both, ec);
    beast::get_lowest_layer(ws).socket().close(ec);
  }
};

struct HttpConnection : std::enable_shared_from_this<HttpConnection> {
  beast::tcp_stream stream;
  beast::flat_buffer buffer;
  http::request<http::string_body> req;
  std::shared_ptr<Server::Impl> server;

  HttpConnection(tcp::socket&& socket, std::shared_ptr<Server::Impl> s)
      : stream(std::move(socket)), server(std::move(s)) {}

  void read() {
    req = {};
    stream.expires_after(std::chrono::seconds(30));
    http::async_read(stream, buffer, req,
                     [self = shared_from_this()](beast::error_code ec, std::size_t) {
                       if (ec) {
                         beast::error_code ignored;
                         self->stream.socket().shutdown(tcp::socket::shutdown_send, ignored);
                         return;
                       }
                       self->dispatch();
                     });
  }

  void dispatch() {
    if (websocket::is_upgrade(req)) {
      const std::string target = strip_query(req.target());
      const std::string prefix = "/session/";
      std::shared_ptr<Entry> e;
      if (target.rfind(prefix, 0) == 0) e = server->find(target.substr(prefix.size()));
      if (e) {
        std::make_shared<WsClient>(stream.release_socket(), server, e)->run(std::move(req));
        return;
      }
      http::response<http::string_body> res{http::status::not_found, req.version()};
      res.set(http::field::content_type, "application/json");
      res.body() = error_frame("not_found", "no session at " + target).dump();
      res.keep_alive(false);
      respond(std::move(res));
      return;
    }
    respond(server->handle_http(req));
  }

  void respond(http::response<http::string_body> res) {
    res.prepare_payload();
    auto sp = std::make_shared<http::response<http::string_body>>(std::move(res));
    http::async_write(stream, *sp, [self = shared_from_this(), sp](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (!sp->keep_alive()) {
        beast::error_code ignored;
        self->stream.socket().shutdown(tcp::socket::shutdown_send, ignored);
        return;
      }
      self->read();
    });
  }
};

}  // namespace

void Server::Impl::accept() {
  acceptor.async_accept([self = shared_from_this()](beast::error_code ec, tcp::socket socket) {
    if (self->stopping) return;
    if (!ec) std::make_shared<HttpConnection>(std::move(socket), self)->read();
    self->accept();
  });
}

std::shared_ptr<Entry> Server::Impl::create_session(const json& body) {
  SessionConfig cfg = options.session;
  cfg.seed = options.session.seed + static_cast<std::uint64_t>(created);
  if (body.contains("seed")) cfg.seed = body.at("seed").get<std::uint64_t>();
  if (body.contains("series_episodes")) cfg.series_episodes = body.at("series_episodes").get<int>();
  std::shared_ptr<const nn::Policy<float>> av = policy;
  if (body.contains("checkpoint")) {
    av = std::make_shared<const nn::Policy<float>>(nn::load_policy<float>(body.at("checkpoint").get<std::string>()));
  }
  std::ostringstream id;
  id << 's' << std::setw(4) << std::setfill('0') << ++created;
  auto e = std::make_shared<Entry>(io);
  e->session = std::make_unique<Session>(id.str(), track, av, cfg);
  if (body.contains("driver_level")) {
    e->session->set_driver_level(eval::parse_driver_level(body.at("driver_level").get<std::string>()));
  }
  sessions[id.str()] = e;
  return e;
}

http::response<http::string_body> Server::Impl::handle_http(const http::request<http::string_body>& req) {
  http::response<http::string_body> res{http::status::ok, req.version()};
  res.set(http::field::content_type, "application/json");
  res.keep_alive(req.keep_alive());
  const std::string target = strip_query(req.target());
  auto fail = [&](http::status status, const std::string& code, const std::string& msg) {
    res.result(status);
    res.body() = error_frame(code, msg).dump();
    return res;
  };

  if (target == "/health" && req.method() == http::verb::get) {
    res.body() = json{{"ok", true}, {"proto_version", kProtoVersion}}.dump();
    return res;
  }
  if (target == "/sessions") {
    if (req.method() != http::verb::post) return fail(http::status::method_not_allowed, "bad_request", "use POST");
    json body = json::object();
    if (!req.body().empty()) {
      try {
        body = json::parse(req.body());
      } catch (const json::parse_error&) {
        return fail(http::status::bad_request, "bad_request", "body is not valid JSON");
      }
      if (!body.is_object()) return fail(http::status::bad_request, "bad_request", "body must be an object");
      if (body.contains("proto_version") && body["proto_version"] != kProtoVersion) {
        return fail(http::status::bad_request, "bad_request", "unsupported proto_version");
      }
    }
    std::shared_ptr<Entry> e;
    try {
      e = create_session(body);
    } catch (const nn::CheckpointError& err) {
      return fail(http::status::bad_request, "bad_checkpoint", err.what());
    } catch (const std::exception& err) {
      return fail(http::status::bad_request, "bad_request", err.what());
    }
    const std::string& id = e->session->id();
    res.result(http::status::created);
    res.body() = json{{"proto_version", kProtoVersion},
                      {"session", id},
                      {"phase", phase_name(e->session->phase())},
                      {"websocket", "/session/" + id},
                      {"archive", "/sessions/" + id + "/archive"}}
                     .dump();
    return res;
  }
  const std::string prefix = "/sessions/", suffix = "/archive";
  if (req.method() == http::verb::get && target.rfind(prefix, 0) == 0 && target.size() > prefix.size() + suffix.size() &&
      target.compare(target.size() - suffix.size(), suffix.size(), suffix) == 0) {
    const std::string id = target.substr(prefix.size(), target.size() - prefix.size() - suffix.size());
    auto e = find(id);
    if (!e) return fail(http::status::not_found, "not_found", "unknown session " + id);
    res.body() = e->session->archive().dump();
    return res;
  }
  return fail(http::status::not_found, "not_found", "no route for " + target);
}

void Server::Impl::attach(const std::shared_ptr<Entry>& e, const std::shared_ptr<WsClient>& c) {
  e->clients.push_back(c);
  if (e->session->paused()) {
    e->session->reconnect(now_s());
    e->pause_timer.cancel();
  }
}

void Server::Impl::detach(const std::shared_ptr<Entry>& e, const WsClient* c) {
  std::erase_if(e->clients, [c](const std::weak_ptr<WsClient>& w) {
    auto p = w.lock();
    return !p || p.get() == c || p->closed;
  });
  if (!e->clients.empty() || stopping || e->session->phase() != Phase::Running) return;
  e->session->disconnect(now_s());
  const auto timeout = std::chrono::duration_cast<Clock::duration>(
      std::chrono::duration<double>(e->session->config().disconnect_timeout_s));
  e->pause_timer.expires_after(timeout);
  e->pause_timer.async_wait([self = shared_from_this(), e](beast::error_code ec) {
    if (ec || self->stopping) return;
    self->broadcast(e, e->session->check_timeout(self->now_s() + 1e-9));
    if (e->session->phase() == Phase::Finished) self->archive(e);
  });
}

void Server::Impl::broadcast(const std::shared_ptr<Entry>& e, const std::vector<json>& frames) {
  for (const auto& f : frames) {
    const std::string text = f.dump();
    const bool state = f.value("type", "") == "state";
    for (const auto& w : e->clients) {
      if (auto c = w.lock()) c->send(text, state);
    }
  }
}

void Server::Impl::handle_message(const std::shared_ptr<Entry>& e, const std::shared_ptr<WsClient>& c,
                                  const std::string& text) {
  Session& s = *e->session;
  try {
    const ClientMessage msg = parse_client_message(text);
    if (const auto* join = std::get_if<JoinMsg>(&msg)) {
      if (join->level) s.set_driver_level(*join->level);
      c->send(s.welcome_frame().dump(), false);
    } else if (const auto* ctl = std::get_if<ControlMsg>(&msg)) {
      s.ingest_control(*ctl);
    } else if (std::holds_alternative<StartMsg>(msg)) {
      broadcast(e, s.start());
      start_ticking(e);
    } else {
      broadcast(e, s.reset());
    }
  } catch (const ProtocolError& err) {
    c->send(error_frame("bad_message", err.what()).dump(), false);
  } catch (const StateError& err) {
    c->send(error_frame("state_error", err.what()).dump(), false);
  }
}

void Server::Impl::start_ticking(const std::shared_ptr<Entry>& e) {
  if (e->ticking) return;
  e->ticking = true;
  e->next_tick = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                    std::chrono::duration<double>(1.0 / e->session->config().tick_hz));
  schedule_tick(e);
}

void Server::Impl::schedule_tick(const std::shared_ptr<Entry>& e) {
  e->tick_timer.expires_at(e->next_tick);
  e->tick_timer.async_wait([self = shared_from_this(), e](beast::error_code ec) {
    if (ec || self->stopping) return;
    self->on_tick(e);
  });
}

void Server::Impl::on_tick(const std::shared_ptr<Entry>& e) {
  broadcast(e, e->session->tick());
  if (e->session->phase() == Phase::Finished) {
    e->ticking = false;
    archive(e);
    return;
  }
  const auto period = std::chrono::duration_cast<Clock::duration>(
      std::chrono::duration<double>(1.0 / e->session->config().tick_hz));
  // Fixed schedule; resynchronize only after falling a full period behind.
  e->next_tick += period;
  const auto now = Clock::now();
  if (now - e->next_tick > period) e->next_tick = now + period;
  schedule_tick(e);
}

void Server::Impl::archive(const std::shared_ptr<Entry>& e) {
  if (e->archived) return;
  e->archived = true;
  const Session& s = *e->session;
  const std::filesystem::path dir = options.archive_dir / s.id();
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "archive.json") << s.archive().dump() << "\n";
  for (const auto& r : s.results()) {
    env::save_record(r.record, (dir / ("episode" + std::to_string(r.episode) + ".jsonl")).string());
  }
  archived.fetch_add(1);
}

void Server::Impl::stop() {
  if (stopping) return;
  stopping = true;
  beast::error_code ec;
  acceptor.close(ec);
  if (signals) signals->cancel(ec);
  for (auto& [id, e] : sessions) {
    broadcast(e, e->session->abort("server_shutdown"));
    archive(e);
    e->tick_timer.cancel();
    e->pause_timer.cancel();
    for (const auto& w : e->clients) {
      if (auto c = w.lock()) c->shutdown();
    }
  }
  io.stop();
}

Server::Server(std::shared_ptr<const sim::TrackSpec> track, std::shared_ptr<const nn::Policy<float>> av_policy,
               ServerOptions options)
    : impl_(std::make_shared<Impl>()) {
  if (!av_policy) throw std::invalid_argument("server needs an AV policy");
  impl_->track = std::move(track);
  impl_->policy = std::move(av_policy);
  impl_->options = std::move(options);
}

Server::~Server() {
  request_stop();
  wait();
}

int Server::start() {
  Impl& m = *impl_;
  beast::error_code ec;
  const auto address = net::ip::make_address(m.options.address, ec);
  if (ec) throw std::runtime_error("invalid listen address '" + m.options.address + "'");
  const tcp::endpoint endpoint{address, static_cast<unsigned short>(m.options.port)};
  m.acceptor.open(endpoint.protocol(), ec);
  if (!ec) m.acceptor.set_option(net::socket_base::reuse_address(true), ec);
  if (!ec) m.acceptor.bind(endpoint, ec);
  if (!ec) m.acceptor.listen(net::socket_base::max_listen_connections, ec);
  if (ec) {
    throw std::runtime_error("cannot listen on " + m.options.address + ":" +
                             std::to_string(m.options.port) + ": " + ec.message());
  }
  std::filesystem::create_directories(m.options.archive_dir);
  if (m.options.handle_signals) {
    m.signals.emplace(m.io, SIGINT, SIGTERM);
    m.signals->async_wait([self = impl_](beast::error_code err, int) {
      if (!err) self->stop();
    });
  }
  m.accept();
  const int port = m.acceptor.local_endpoint().port();
  m.thread = std::thread([self = impl_] { self->io.run(); });
  return port;
}

void Server::request_stop() {
  net::post(impl_->io, [self = impl_] { self->stop(); });
}

void Server::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

int Server::archived_count() const { return impl_->archived.load(); }

}  // namespace cadlab::hil
