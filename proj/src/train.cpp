#include "treecss/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <sstream>

namespace treecss::train {

namespace {

void put_matrix(Bytes& out, const Matrix& m) {
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) put_f64(out, m(i, j));
}

Matrix get_matrix(ByteReader& r, Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = r.get_f64();
    return m;
}

void ensure_parties(net::Bus& bus, int m) {
    for (int i = 1; i <= m; ++i)
        if (!bus.is_registered(net::client(i))) bus.register_party(net::client(i));
    if (!bus.is_registered(net::kAggServer)) bus.register_party(net::kAggServer);
    if (!bus.is_registered(net::kLabelOwner)) bus.register_party(net::kLabelOwner);
}

Matrix glorot(Index rows, Index cols, Index fan_in, Index fan_out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Scalar a = std::sqrt(6.0 / static_cast<Scalar>(fan_in + fan_out));
    std::uniform_real_distribution<Scalar> u(-a, a);
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = u(rng);
    return m;
}

// non-finite batch loss inside step(); the grid search skips that lr
class Divergence : public TrainError {
public:
    using TrainError::TrainError;
};

// hits (classification) or squared-error sum (regression) over one chunk
Scalar metric_sum(const Matrix& scores, const Vector& y, data::Task task) {
    const Index k = scores.rows();
    Scalar acc = 0;
    for (Index i = 0; i < k; ++i) {
        if (task.kind == data::TaskKind::Regression) {
            const Scalar d = scores(i, 0) - y[i];
            acc += d * d;
        } else {
            Index pred = 0;
            if (scores.cols() == 1) {
                pred = scores(i, 0) > 0 ? 1 : 0;
            } else {
                scores.row(i).maxCoeff(&pred);
            }
            if (pred == static_cast<Index>(y[i])) acc += 1;
        }
    }
    return acc;
}

}  // namespace

const char* to_string(ModelKind k) {
    switch (k) {
        case ModelKind::LogisticRegression: return "lr";
        case ModelKind::LinearRegression: return "linreg";
        case ModelKind::Mlp: return "mlp";
    }
    return "?";
}

void TrainConfig::validate() const {
    if (lr_grid.empty()) throw TrainError("TrainConfig: empty lr grid");
    for (Scalar lr : lr_grid)
        if (!(lr > 0)) throw TrainError("TrainConfig: non-positive lr in grid");
    if (!(batch_fraction >= 0.001 && batch_fraction <= 0.01))
        throw TrainError("TrainConfig: batch_fraction must lie in [0.001, 0.01]");
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1 && eps > 0))
        throw TrainError("TrainConfig: bad Adam constants");
    if (!(convergence_tol > 0) || convergence_window < 1)
        throw TrainError("TrainConfig: bad convergence rule");
    if (max_epochs < 0 || hidden < 1) throw TrainError("TrainConfig: bad epoch/width limits");
    if (!(validation_fraction > 0 && validation_fraction < 1))
        throw TrainError("TrainConfig: validation_fraction must lie in (0,1)");
}

SplitModel::StepOut weighted_loss(const Matrix& scores, const Vector& y, const Vector& w,
                                  data::Task task, Matrix* dscores) {
    const Index k = scores.rows();
    const Index od = scores.cols();
    if (dscores) dscores->setZero(k, od);
    SplitModel::StepOut out;
    for (Index i = 0; i < k; ++i) {
        const Scalar wi = w[i];
        out.weight_sum += wi;
        if (task.kind == data::TaskKind::Regression) {
            const Scalar diff = scores(i, 0) - y[i];
            out.loss_sum += wi * diff * diff;
            if (dscores) (*dscores)(i, 0) = wi * 2.0 * diff;
        } else if (od == 1) {
            // binary cross-entropy with logits, numerically stable
            const Scalar s = scores(i, 0);
            const Scalar yi = y[i];
            out.loss_sum += wi * (std::max(s, 0.0) - s * yi + std::log1p(std::exp(-std::abs(s))));
            if (dscores) {
                const Scalar sig = 1.0 / (1.0 + std::exp(-s));
                (*dscores)(i, 0) = wi * (sig - yi);
            }
        } else {
            // softmax cross-entropy via log-sum-exp
            const Scalar mx = scores.row(i).maxCoeff();
            Scalar lse = 0;
            for (Index j = 0; j < od; ++j) lse += std::exp(scores(i, j) - mx);
            lse = mx + std::log(lse);
            const Index yi = static_cast<Index>(y[i]);
            out.loss_sum += wi * (lse - scores(i, yi));
            if (dscores) {
                for (Index j = 0; j < od; ++j)
                    (*dscores)(i, j) = wi * std::exp(scores(i, j) - lse);
                (*dscores)(i, yi) -= wi;
            }
        }
    }
    return out;
}

std::uint64_t split_step_bytes(int m, std::uint64_t k, int h, int od) {
    const std::uint64_t um = static_cast<std::uint64_t>(m);
    const std::uint64_t uh = static_cast<std::uint64_t>(h);
    const std::uint64_t uod = static_cast<std::uint64_t>(od);
    return um * (4 + 8 * k)             // BATCH_IDS fan-out
           + 2 * um * (8 + 8 * k * uh)  // ACTIVATION up, BOTTOM_GRAD down
           + 2 * (8 + 8 * k * uod);     // TOP_OUTPUT over, LOSS_GRAD back
}

std::uint64_t split_forward_bytes(int m, std::uint64_t k, int h, int od) {
    const std::uint64_t um = static_cast<std::uint64_t>(m);
    return um * (4 + 8 * k) + um * (8 + 8 * k * static_cast<std::uint64_t>(h)) +
           (8 + 8 * k * static_cast<std::uint64_t>(od));
}

SplitModel::SplitModel(const data::VerticalDataset& ds, ModelKind kind, int hidden,
                       std::uint64_t init_seed)
    : ds_(&ds), kind_(kind), task_(ds.task) {
    const int m = ds.num_clients();
    if (m < 1) throw TrainError("SplitModel: dataset has no clients");

    if (kind_ == ModelKind::LogisticRegression) {
        if (task_.kind != data::TaskKind::Classification || task_.num_classes != 2)
            throw TrainError("logistic regression expects a binary classification task");
        h_ = od_ = 1;
    } else if (kind_ == ModelKind::LinearRegression) {
        if (task_.kind != data::TaskKind::Regression)
            throw TrainError("linear regression expects a regression task");
        h_ = od_ = 1;
    } else {
        h_ = hidden;
        od_ = task_.kind == data::TaskKind::Regression
                  ? 1
                  : (task_.num_classes == 2 ? 1 : task_.num_classes);
        if (task_.kind == data::TaskKind::Classification && task_.num_classes < 2)
            throw TrainError("classification task needs at least 2 classes");
    }

    for (int i = 0; i < m; ++i) {
        const Index d = ds.clients[static_cast<std::size_t>(i)].dim;
        Block b;
        if (kind_ == ModelKind::Mlp) {
            b.w = glorot(h_, d, d, h_,
                         mix_seed(init_seed, "init.bottom", static_cast<std::uint64_t>(i + 1)));
            b.b = Vector::Zero(h_);
            b.has_bias = true;
        } else {
            // identity-sum kinds: per-client dot products, single server bias
            b.w = Matrix::Zero(1, d);
            b.b = Vector::Zero(0);
        }
        b.mw = Matrix::Zero(b.w.rows(), b.w.cols());
        b.vw = Matrix::Zero(b.w.rows(), b.w.cols());
        b.mb = Vector::Zero(b.b.size());
        b.vb = Vector::Zero(b.b.size());
        bottoms_.push_back(std::move(b));
    }

    if (kind_ == ModelKind::Mlp) {
        const Index in = static_cast<Index>(m) * h_;
        top_.w = glorot(od_, in, in, od_, mix_seed(init_seed, "init.top"));
        top_.b = Vector::Zero(od_);
        top_.has_bias = true;
    } else {
        top_.w = Matrix::Zero(0, 0);
        top_.b = Vector::Zero(1);
        top_.has_bias = true;
    }
    top_.mw = Matrix::Zero(top_.w.rows(), top_.w.cols());
    top_.vw = Matrix::Zero(top_.w.rows(), top_.w.cols());
    top_.mb = Vector::Zero(top_.b.size());
    top_.vb = Vector::Zero(top_.b.size());
}

SplitModel::ForwardState SplitModel::forward(net::Bus& bus, std::uint64_t session,
                                             const std::vector<SampleId>& batch,
                                             const std::map<SampleId, Scalar>* weights,
                                             bool for_grad) {
    (void)for_grad;
    if (batch.empty()) throw TrainError("split step: empty batch");
    const int m = num_clients();
    const Index k = static_cast<Index>(batch.size());

    // label owner announces the batch
    for (int i = 1; i <= m; ++i) {
        Bytes p;
        put_u32(p, static_cast<std::uint32_t>(batch.size()));
        for (SampleId id : batch) put_u64(p, id);
        bus.exchange(net::Envelope{net::kLabelOwner, net::client(i), session,
                                   net::MsgKind::BatchIds, std::move(p)});
    }

    ForwardState st;
    st.x.resize(static_cast<std::size_t>(m));
    st.z.resize(static_cast<std::size_t>(m));

    // clients run their bottoms and ship activations to the server
    for (int i = 0; i < m; ++i) {
        net::Envelope env = bus.recv_from(net::client(i + 1), session, net::kLabelOwner);
        ByteReader br{std::span<const std::uint8_t>(env.payload)};
        const std::uint32_t count = br.get_u32();
        std::vector<SampleId> ids(count);
        for (auto& id : ids) id = br.get_u64();

        const Matrix x = data::gather_rows(ds_->clients[static_cast<std::size_t>(i)], ids);
        const Block& blk = bottoms_[static_cast<std::size_t>(i)];
        Matrix z = x * blk.w.transpose();
        if (blk.has_bias) z.rowwise() += blk.b.transpose();
        if (kind_ == ModelKind::Mlp) z = z.array().tanh().matrix();
        st.x[static_cast<std::size_t>(i)] = x;
        st.z[static_cast<std::size_t>(i)] = z;

        Bytes p;
        put_u32(p, count);
        put_u32(p, static_cast<std::uint32_t>(h_));
        put_matrix(p, z);
        bus.exchange(net::Envelope{net::client(i + 1), net::kAggServer, session,
                                   net::MsgKind::Activation, std::move(p)});
    }

    // server merges and applies the top model
    Matrix scores;
    if (kind_ == ModelKind::Mlp) {
        Matrix cat(k, static_cast<Index>(m) * h_);
        for (int i = 0; i < m; ++i) {
            net::Envelope env = bus.recv_from(net::kAggServer, session, net::client(i + 1));
            ByteReader br{std::span<const std::uint8_t>(env.payload)};
            const Index kk = static_cast<Index>(br.get_u32());
            const Index hh = static_cast<Index>(br.get_u32());
            cat.block(0, static_cast<Index>(i) * h_, k, h_) = get_matrix(br, kk, hh);
        }
        scores = cat * top_.w.transpose();
        scores.rowwise() += top_.b.transpose();
        st.z.push_back(std::move(cat));  // st.z.back() caches the concatenation
    } else {
        scores = Matrix::Zero(k, 1);
        for (int i = 0; i < m; ++i) {
            net::Envelope env = bus.recv_from(net::kAggServer, session, net::client(i + 1));
            ByteReader br{std::span<const std::uint8_t>(env.payload)};
            const Index kk = static_cast<Index>(br.get_u32());
            br.get_u32();
            scores += get_matrix(br, kk, 1);
        }
        scores.array() += top_.b[0];
    }

    Bytes p;
    put_u32(p, static_cast<std::uint32_t>(k));
    put_u32(p, static_cast<std::uint32_t>(od_));
    put_matrix(p, scores);
    bus.exchange(net::Envelope{net::kAggServer, net::kLabelOwner, session, net::MsgKind::TopOutput,
                               std::move(p)});
    net::Envelope env = bus.recv_from(net::kLabelOwner, session, net::kAggServer);
    ByteReader br{std::span<const std::uint8_t>(env.payload)};
    const Index kk = static_cast<Index>(br.get_u32());
    const Index oo = static_cast<Index>(br.get_u32());
    st.scores = get_matrix(br, kk, oo);

    st.y = data::gather_labels(ds_->labels, batch);
    st.w = Vector::Ones(k);
    if (weights)
        for (Index i = 0; i < k; ++i)
            if (auto it = weights->find(batch[static_cast<std::size_t>(i)]); it != weights->end())
                st.w[i] = it->second;
    return st;
}

void SplitModel::adam(Block& blk, const Matrix& gw, const Vector& gb, Scalar lr,
                      const TrainConfig& cfg) {
    blk.t += 1;
    const Scalar bc1 = 1.0 - std::pow(cfg.beta1, static_cast<Scalar>(blk.t));
    const Scalar bc2 = 1.0 - std::pow(cfg.beta2, static_cast<Scalar>(blk.t));
    if (blk.w.size() > 0) {
        blk.mw = cfg.beta1 * blk.mw + (1.0 - cfg.beta1) * gw;
        blk.vw = (cfg.beta2 * blk.vw.array() + (1.0 - cfg.beta2) * gw.array().square()).matrix();
        blk.w -=
            (lr * (blk.mw.array() / bc1) / ((blk.vw.array() / bc2).sqrt() + cfg.eps)).matrix();
    }
    if (blk.b.size() > 0) {
        blk.mb = cfg.beta1 * blk.mb + (1.0 - cfg.beta1) * gb;
        blk.vb = (cfg.beta2 * blk.vb.array() + (1.0 - cfg.beta2) * gb.array().square()).matrix();
        blk.b -=
            (lr * (blk.mb.array() / bc1) / ((blk.vb.array() / bc2).sqrt() + cfg.eps)).matrix();
    }
}

SplitModel::StepOut SplitModel::step(net::Bus& bus, std::uint64_t session,
                                     const std::vector<SampleId>& batch,
                                     const std::map<SampleId, Scalar>& weights, Scalar lr,
                                     const TrainConfig& cfg) {
    ForwardState st = forward(bus, session, batch, &weights, true);
    const int m = num_clients();
    const Index k = st.scores.rows();

    Matrix dscores;
    const StepOut out = weighted_loss(st.scores, st.y, st.w, task_, &dscores);
    if (!std::isfinite(out.loss_sum))
        throw Divergence("non-finite batch loss at lr " + std::to_string(lr));

    // label owner returns d(loss)/d(scores)
    Bytes p;
    put_u32(p, static_cast<std::uint32_t>(k));
    put_u32(p, static_cast<std::uint32_t>(od_));
    put_matrix(p, dscores);
    bus.exchange(net::Envelope{net::kLabelOwner, net::kAggServer, session, net::MsgKind::LossGrad,
                               std::move(p)});
    net::Envelope genv = bus.recv_from(net::kAggServer, session, net::kLabelOwner);
    ByteReader gr{std::span<const std::uint8_t>(genv.payload)};
    const Index gk = static_cast<Index>(gr.get_u32());
    const Index go = static_cast<Index>(gr.get_u32());
    const Matrix g = get_matrix(gr, gk, go);

    // top backward on the server, then per-client bottom legs
    std::vector<Matrix> dz(static_cast<std::size_t>(m));
    if (kind_ == ModelKind::Mlp) {
        const Matrix& cat = st.z.back();
        const Matrix gtw = g.transpose() * cat;
        const Vector gtb = g.colwise().sum().transpose();
        const Matrix dcat = g * top_.w;
        for (int i = 0; i < m; ++i)
            dz[static_cast<std::size_t>(i)] = dcat.block(0, static_cast<Index>(i) * h_, k, h_);
        adam(top_, gtw, gtb, lr, cfg);
    } else {
        const Vector gtb = Vector::Constant(1, g.sum());
        for (int i = 0; i < m; ++i) dz[static_cast<std::size_t>(i)] = g;
        adam(top_, Matrix(), gtb, lr, cfg);
    }

    for (int i = 0; i < m; ++i) {
        Bytes bp;
        put_u32(bp, static_cast<std::uint32_t>(k));
        put_u32(bp, static_cast<std::uint32_t>(h_));
        put_matrix(bp, dz[static_cast<std::size_t>(i)]);
        bus.exchange(net::Envelope{net::kAggServer, net::client(i + 1), session,
                                   net::MsgKind::BottomGrad, std::move(bp)});
    }
    for (int i = 0; i < m; ++i) {
        net::Envelope env = bus.recv_from(net::client(i + 1), session, net::kAggServer);
        ByteReader br{std::span<const std::uint8_t>(env.payload)};
        const Index kk = static_cast<Index>(br.get_u32());
        const Index hh = static_cast<Index>(br.get_u32());
        Matrix dzi = get_matrix(br, kk, hh);
        Block& blk = bottoms_[static_cast<std::size_t>(i)];
        if (kind_ == ModelKind::Mlp) {
            const Matrix& z = st.z[static_cast<std::size_t>(i)];
            dzi = (dzi.array() * (1.0 - z.array().square())).matrix();
        }
        const Matrix gw = dzi.transpose() * st.x[static_cast<std::size_t>(i)];
        const Vector gb = blk.has_bias ? Vector(dzi.colwise().sum().transpose()) : Vector();
        adam(blk, gw, gb, lr, cfg);
    }
    return out;
}

Matrix SplitModel::forward_scores(net::Bus& bus, std::uint64_t session,
                                  const std::vector<SampleId>& batch) {
    return forward(bus, session, batch, nullptr, false).scores;
}

SplitModel::StepOut SplitModel::loss_only(net::Bus& bus, std::uint64_t session,
                                          const std::vector<SampleId>& batch,
                                          const std::map<SampleId, Scalar>& weights) {
    ForwardState st = forward(bus, session, batch, &weights, false);
    return weighted_loss(st.scores, st.y, st.w, task_, nullptr);
}

SplitModel::Grads SplitModel::gradients(net::Bus& bus, std::uint64_t session,
                                        const std::vector<SampleId>& batch,
                                        const std::map<SampleId, Scalar>& weights) {
    ForwardState st = forward(bus, session, batch, &weights, true);
    const int m = num_clients();
    const Index k = st.scores.rows();

    Matrix dscores;
    weighted_loss(st.scores, st.y, st.w, task_, &dscores);

    Bytes p;
    put_u32(p, static_cast<std::uint32_t>(k));
    put_u32(p, static_cast<std::uint32_t>(od_));
    put_matrix(p, dscores);
    bus.exchange(net::Envelope{net::kLabelOwner, net::kAggServer, session, net::MsgKind::LossGrad,
                               std::move(p)});
    net::Envelope genv = bus.recv_from(net::kAggServer, session, net::kLabelOwner);
    ByteReader gr{std::span<const std::uint8_t>(genv.payload)};
    gr.get_u32();
    gr.get_u32();
    const Matrix g = get_matrix(gr, k, od_);

    Grads out;
    std::vector<Matrix> dz(static_cast<std::size_t>(m));
    if (kind_ == ModelKind::Mlp) {
        const Matrix& cat = st.z.back();
        out.top_w = g.transpose() * cat;
        out.top_b = g.colwise().sum().transpose();
        const Matrix dcat = g * top_.w;
        for (int i = 0; i < m; ++i)
            dz[static_cast<std::size_t>(i)] = dcat.block(0, static_cast<Index>(i) * h_, k, h_);
    } else {
        out.top_w = Matrix();
        out.top_b = Vector::Constant(1, g.sum());
        for (int i = 0; i < m; ++i) dz[static_cast<std::size_t>(i)] = g;
    }
    for (int i = 0; i < m; ++i) {
        Bytes bp;
        put_u32(bp, static_cast<std::uint32_t>(k));
        put_u32(bp, static_cast<std::uint32_t>(h_));
        put_matrix(bp, dz[static_cast<std::size_t>(i)]);
        bus.exchange(net::Envelope{net::kAggServer, net::client(i + 1), session,
                                   net::MsgKind::BottomGrad, std::move(bp)});
    }
    for (int i = 0; i < m; ++i) {
        net::Envelope env = bus.recv_from(net::client(i + 1), session, net::kAggServer);
        ByteReader br{std::span<const std::uint8_t>(env.payload)};
        br.get_u32();
        br.get_u32();
        Matrix dzi = get_matrix(br, k, h_);
        const Block& blk = bottoms_[static_cast<std::size_t>(i)];
        if (kind_ == ModelKind::Mlp) {
            const Matrix& z = st.z[static_cast<std::size_t>(i)];
            dzi = (dzi.array() * (1.0 - z.array().square())).matrix();
        }
        out.bottom_w.push_back(dzi.transpose() * st.x[static_cast<std::size_t>(i)]);
        out.bottom_b.push_back(blk.has_bias ? Vector(dzi.colwise().sum().transpose()) : Vector());
    }
    return out;
}

nlohmann::json SplitModel::dump_params() const {
    nlohmann::json blocks = nlohmann::json::array();
    auto add = [&blocks](const std::string& name, const Matrix& m) {
        std::vector<Scalar> flat;
        flat.reserve(static_cast<std::size_t>(m.size()));
        for (Index i = 0; i < m.rows(); ++i)
            for (Index j = 0; j < m.cols(); ++j) flat.push_back(m(i, j));
        blocks.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"data", flat}});
    };
    for (std::size_t i = 0; i < bottoms_.size(); ++i) {
        add("client" + std::to_string(i + 1) + ".w", bottoms_[i].w);
        if (bottoms_[i].has_bias && bottoms_[i].b.size() > 0)
            add("client" + std::to_string(i + 1) + ".b", Matrix(bottoms_[i].b));
    }
    if (top_.w.size() > 0) add("top.w", top_.w);
    add("top.b", Matrix(top_.b));
    return {{"kind", to_string(kind_)}, {"blocks", blocks}};
}

Scalar evaluate(net::Bus& bus, SplitModel& model, const std::vector<SampleId>& ids) {
    if (ids.empty()) throw TrainError("evaluate: empty id list");
    ensure_parties(bus, model.num_clients());
    const std::uint64_t session = bus.open_session();
    constexpr std::size_t kChunk = 256;
    Scalar acc = 0;
    for (std::size_t at = 0; at < ids.size(); at += kChunk) {
        const std::size_t len = std::min(kChunk, ids.size() - at);
        const std::vector<SampleId> chunk(ids.begin() + static_cast<std::ptrdiff_t>(at),
                                          ids.begin() + static_cast<std::ptrdiff_t>(at + len));
        const Matrix s = model.forward_scores(bus, session, chunk);
        const Vector y = data::gather_labels(model.dataset().labels, chunk);
        acc += metric_sum(s, y, model.dataset().task);
    }
    bus.close_session(session);
    return acc / static_cast<Scalar>(ids.size());
}

nlohmann::json TrainReport::to_json() const {
    return {{"train_metric", train_metric},
            {"test_metric", test_metric},
            {"epochs", epochs},
            {"wall_ns", wall_ns},
            {"loss_curve", loss_curve},
            {"samples_used", samples_used},
            {"samples_processed", samples_processed},
            {"selected_lr", selected_lr}};
}

TrainOutcome train_until_converged(net::Bus& bus, ModelKind kind, const TrainData& data,
                                   const TrainConfig& cfg) {
    cfg.validate();
    if (!data.ds) throw TrainError("train: no dataset");
    if (data.train_ids.size() < 2) throw TrainError("train: need at least 2 training samples");
    ensure_parties(bus, data.ds->num_clients());

    const auto t0 = std::chrono::steady_clock::now();

    // carve the validation split off a seeded shuffle of the training ids
    std::vector<SampleId> shuffled = data.train_ids;
    {
        std::mt19937_64 vrng(mix_seed(cfg.seed, "valsplit"));
        std::shuffle(shuffled.begin(), shuffled.end(), vrng);
    }
    const std::size_t n = shuffled.size();
    const std::size_t n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<Scalar>(n))),
        1, n - 1);
    const std::vector<SampleId> val_ids(shuffled.begin(),
                                        shuffled.begin() + static_cast<std::ptrdiff_t>(n_val));
    const std::vector<SampleId> fit_ids(shuffled.begin() + static_cast<std::ptrdiff_t>(n_val),
                                        shuffled.end());
    const std::size_t batch_size = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::llround(cfg.batch_fraction * static_cast<Scalar>(fit_ids.size()))));

    const bool classification = data.ds->task.kind == data::TaskKind::Classification;
    std::optional<SplitModel> best_model;
    Scalar best_score = -std::numeric_limits<Scalar>::infinity();
    Scalar best_lr = 0;
    int best_epochs = 0;
    std::vector<Scalar> best_curve;
    std::uint64_t samples_processed = 0;

    for (Scalar lr : cfg.lr_grid) {
        SplitModel model(*data.ds, kind, cfg.hidden, mix_seed(cfg.seed, "init"));
        const std::uint64_t session = bus.open_session();
        std::vector<Scalar> curve;
        bool diverged = false;
        try {
            for (int e = 0; e < cfg.max_epochs; ++e) {
                std::vector<SampleId> order = fit_ids;
                std::mt19937_64 erng(mix_seed(cfg.seed, "epoch", static_cast<std::uint64_t>(e)));
                std::shuffle(order.begin(), order.end(), erng);
                Scalar loss_sum = 0, weight_sum = 0;
                for (std::size_t at = 0; at < order.size(); at += batch_size) {
                    const std::size_t len = std::min(batch_size, order.size() - at);
                    const std::vector<SampleId> batch(
                        order.begin() + static_cast<std::ptrdiff_t>(at),
                        order.begin() + static_cast<std::ptrdiff_t>(at + len));
                    const auto out = model.step(bus, session, batch, data.weights, lr, cfg);
                    loss_sum += out.loss_sum;
                    weight_sum += out.weight_sum;
                    samples_processed += len;
                }
                const Scalar epoch_loss = loss_sum / weight_sum;
                curve.push_back(epoch_loss);
                if (!std::isfinite(epoch_loss) || epoch_loss > cfg.divergence_limit) {
                    diverged = true;
                    break;
                }
                const int e1 = static_cast<int>(curve.size()) - 1;
                if (e1 >= cfg.convergence_window &&
                    std::abs(curve[static_cast<std::size_t>(e1)] -
                             curve[static_cast<std::size_t>(e1 - cfg.convergence_window)]) <
                        cfg.convergence_tol)
                    break;
            }
        } catch (const Divergence&) {
            diverged = true;
        }
        bus.close_session(session);
        if (diverged) continue;

        const Scalar val = evaluate(bus, model, val_ids);
        const Scalar score = classification ? val : -val;
        if (score > best_score) {
            best_score = score;
            best_model.emplace(std::move(model));
            best_lr = lr;
            best_epochs = static_cast<int>(curve.size());
            best_curve = std::move(curve);
        }
    }

    if (!best_model) {
        std::ostringstream oss;
        oss << "training diverged for every lr in the grid {";
        for (std::size_t i = 0; i < cfg.lr_grid.size(); ++i)
            oss << (i ? ", " : "") << cfg.lr_grid[i];
        oss << "}";
        throw TrainError(oss.str());
    }

    TrainReport rep;
    rep.train_metric = evaluate(bus, *best_model, data.train_ids);
    rep.test_metric = data.test_ids.empty() ? std::numeric_limits<Scalar>::quiet_NaN()
                                            : evaluate(bus, *best_model, data.test_ids);
    rep.epochs = best_epochs;
    rep.loss_curve = std::move(best_curve);
    rep.samples_used = data.train_ids.size();
    rep.samples_processed = samples_processed;
    rep.selected_lr = best_lr;
    rep.wall_ns = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0)
            .count());
    return TrainOutcome{std::move(rep), std::move(*best_model)};
}

Scalar knn_predict(net::Bus& bus, std::uint64_t session, const data::VerticalDataset& ds,
                   SampleId query, const std::vector<SampleId>& refs,
                   const std::map<SampleId, Scalar>& weights, int k) {
    if (ds.task.kind != data::TaskKind::Classification)
        throw TrainError("knn: classification tasks only");
    if (refs.empty()) throw TrainError("knn: empty reference set");
    if (k < 1 || static_cast<std::size_t>(k) > refs.size())
        throw TrainError("knn: k out of range for " + std::to_string(refs.size()) + " references");
    const int m = ds.num_clients();

    // each client ships its partial squared distances to the label owner
    for (int i = 0; i < m; ++i) {
        const data::ClientTable& t = ds.clients[static_cast<std::size_t>(i)];
        const Vector& q = t.at(query);
        Bytes p;
        put_u32(p, static_cast<std::uint32_t>(refs.size()));
        for (SampleId r : refs) put_f64(p, (t.at(r) - q).squaredNorm());
        bus.exchange(net::Envelope{net::client(i + 1), net::kLabelOwner, session,
                                   net::MsgKind::KnnPartial, std::move(p)});
    }

    std::vector<Scalar> dist(refs.size(), 0);
    for (int i = 0; i < m; ++i) {
        net::Envelope env = bus.recv_from(net::kLabelOwner, session, net::client(i + 1));
        ByteReader br{std::span<const std::uint8_t>(env.payload)};
        const std::uint32_t count = br.get_u32();
        if (count != refs.size())
            throw TrainError("knn: partial distance count mismatch from client " +
                             std::to_string(i + 1));
        for (std::size_t j = 0; j < refs.size(); ++j) dist[j] += br.get_f64();
    }

    std::vector<std::pair<Scalar, SampleId>> order(refs.size());
    for (std::size_t j = 0; j < refs.size(); ++j) order[j] = {dist[j], refs[j]};
    std::sort(order.begin(), order.end());

    std::map<Index, Scalar> vote;
    for (int j = 0; j < k; ++j) {
        const SampleId id = order[static_cast<std::size_t>(j)].second;
        const Index label = static_cast<Index>(ds.labels.at(id));
        const auto it = weights.find(id);
        vote[label] += it != weights.end() ? it->second : 1.0;
    }
    Index best_label = vote.begin()->first;
    Scalar best_weight = vote.begin()->second;
    for (const auto& [label, w] : vote)
        if (w > best_weight) {  // map order makes ties resolve to the smaller label
            best_label = label;
            best_weight = w;
        }
    return static_cast<Scalar>(best_label);
}

Scalar knn_evaluate(net::Bus& bus, const data::VerticalDataset& ds,
                    const std::vector<SampleId>& queries, const std::vector<SampleId>& refs,
                    const std::map<SampleId, Scalar>& weights, int k) {
    if (queries.empty()) throw TrainError("knn: empty query list");
    ensure_parties(bus, ds.num_clients());
    const std::uint64_t session = bus.open_session();
    std::size_t hits = 0;
    for (SampleId q : queries) {
        const Scalar pred = knn_predict(bus, session, ds, q, refs, weights, k);
        if (static_cast<Index>(pred) == static_cast<Index>(ds.labels.at(q))) ++hits;
    }
    bus.close_session(session);
    return static_cast<Scalar>(hits) / static_cast<Scalar>(queries.size());
}

}  // namespace treecss::train
