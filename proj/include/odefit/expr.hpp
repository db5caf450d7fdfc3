#pragma once

// Immutable symbolic expression DAG over time, states, parameters and flat
// NLP variables. Supports evaluation, exact first derivatives and
// deterministic infix rendering. Nodes are hash-consed, so structurally
// equal subexpressions share a single id.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <functional>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string_view>
#include <tuple>
#include <string>
#include <unordered_map>
#include <vector>

namespace odefit {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t pos)
      : std::runtime_error(what + " (at position " + std::to_string(pos) + ")"),
        position(pos) {}
  std::size_t position;
};

enum class NodeKind : std::uint8_t {
  Constant,
  Time,
  StateRef,
  ParamRef,
  VarRef,
  Neg,
  Add,
  Sub,
  Mul,
  Div,
  Pow,  // integer exponent >= 1, stored in `index`
};

struct Node {
  NodeKind kind;
  double value = 0.0;  // Constant only
  int index = 0;       // ref index or Pow exponent
  int a = -1;
  int b = -1;
};

/// Evaluation point: time, state vector, parameter vector and the flat
/// vector of NLP variables (used by VarRef nodes).
struct Point {
  double t = 0.0;
  std::span<const double> x{};
  std::span<const double> p{};
  std::span<const double> vars{};
};

/// Reference to a differentiable symbol.
struct VarKey {
  NodeKind kind;  // StateRef, ParamRef or VarRef
  int index;
  friend bool operator<(const VarKey& l, const VarKey& r) {
    return std::tie(l.kind, l.index) < std::tie(r.kind, r.index);
  }
  friend bool operator==(const VarKey& l, const VarKey& r) {
    return l.kind == r.kind && l.index == r.index;
  }
};

class ExprDag {
 public:
  using Id = int;

  Id constant(double v) { return intern({NodeKind::Constant, v, 0, -1, -1}); }
  Id time() { return intern({NodeKind::Time, 0, 0, -1, -1}); }
  Id state(int i) { return intern({NodeKind::StateRef, 0, i, -1, -1}); }
  Id param(int i) { return intern({NodeKind::ParamRef, 0, i, -1, -1}); }
  Id var(int i) { return intern({NodeKind::VarRef, 0, i, -1, -1}); }

  Id neg(Id a) {
    if (is_const(a)) return constant(-node(a).value);
    return intern({NodeKind::Neg, 0, 0, a, -1});
  }
  Id add(Id a, Id b) {
    if (is_const(a) && is_const(b)) return constant(node(a).value + node(b).value);
    if (is_zero(a)) return b;
    if (is_zero(b)) return a;
    return intern({NodeKind::Add, 0, 0, a, b});
  }
  Id sub(Id a, Id b) {
    if (is_const(a) && is_const(b)) return constant(node(a).value - node(b).value);
    if (is_zero(b)) return a;
    if (is_zero(a)) return neg(b);
    return intern({NodeKind::Sub, 0, 0, a, b});
  }
  Id mul(Id a, Id b) {
    if (is_const(a) && is_const(b)) return constant(node(a).value * node(b).value);
    if (is_zero(a) || is_zero(b)) return constant(0.0);
    if (is_one(a)) return b;
    if (is_one(b)) return a;
    return intern({NodeKind::Mul, 0, 0, a, b});
  }
  Id div(Id a, Id b) {
    if (is_const(b) && node(b).value == 0.0)
      throw std::invalid_argument("division by the constant zero node");
    if (is_const(a) && is_const(b)) return constant(node(a).value / node(b).value);
    if (is_one(b)) return a;
    return intern({NodeKind::Div, 0, 0, a, b});
  }
  Id pow(Id a, int k) {
    if (k < 1) throw std::invalid_argument("pow exponent must be an integer >= 1");
    if (k == 1) return a;
    if (is_const(a)) return constant(std::pow(node(a).value, k));
    return intern({NodeKind::Pow, 0, k, a, -1});
  }

  const Node& node(Id id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  double eval(Id root, const Point& pt) const {
    switch (node(root).kind) {
      case NodeKind::Constant: return node(root).value;
      case NodeKind::Time: return pt.t;
      case NodeKind::StateRef: return pt.x[static_cast<std::size_t>(node(root).index)];
      case NodeKind::ParamRef: return pt.p[static_cast<std::size_t>(node(root).index)];
      case NodeKind::VarRef: return pt.vars[static_cast<std::size_t>(node(root).index)];
      case NodeKind::Neg: return -eval(node(root).a, pt);
      case NodeKind::Add: return eval(node(root).a, pt) + eval(node(root).b, pt);
      case NodeKind::Sub: return eval(node(root).a, pt) - eval(node(root).b, pt);
      case NodeKind::Mul: return eval(node(root).a, pt) * eval(node(root).b, pt);
      case NodeKind::Div: {
        double den = eval(node(root).b, pt);
        if (den == 0.0) throw EvalError("division by zero at evaluation point");
        return eval(node(root).a, pt) / den;
      }
      case NodeKind::Pow: {
        double base = eval(node(root).a, pt);
        double r = base;
        for (int i = 1; i < node(root).index; ++i) r *= base;
        return r;
      }
    }
    throw std::logic_error("corrupt node kind");
  }

  /// Exact partial derivative as a new DAG node. Memoized: repeated calls on
  /// the same (root, wrt) return the same id.
  Id diff(Id root, const VarKey& wrt) {
    auto key = std::pair<Id, VarKey>(root, wrt);
    if (auto it = diff_memo_.find(key); it != diff_memo_.end()) return it->second;
    Id d;
    const Node n = node(root);
    switch (n.kind) {
      case NodeKind::Constant:
      case NodeKind::Time:
        d = constant(0.0);
        break;
      case NodeKind::StateRef:
      case NodeKind::ParamRef:
      case NodeKind::VarRef:
        d = constant(VarKey{n.kind, n.index} == wrt ? 1.0 : 0.0);
        break;
      case NodeKind::Neg:
        d = neg(diff(n.a, wrt));
        break;
      case NodeKind::Add:
        d = add(diff(n.a, wrt), diff(n.b, wrt));
        break;
      case NodeKind::Sub:
        d = sub(diff(n.a, wrt), diff(n.b, wrt));
        break;
      case NodeKind::Mul:
        d = add(mul(diff(n.a, wrt), n.b), mul(n.a, diff(n.b, wrt)));
        break;
      case NodeKind::Div:
        d = div(sub(mul(diff(n.a, wrt), n.b), mul(n.a, diff(n.b, wrt))),
                mul(n.b, n.b));
        break;
      case NodeKind::Pow:
        d = mul(mul(constant(static_cast<double>(n.index)), pow(n.a, n.index - 1)),
                diff(n.a, wrt));
        break;
      default:
        throw std::logic_error("corrupt node kind");
    }
    diff_memo_.emplace(key, d);
    return d;
  }

  /// Symbols (states/params/vars) reachable from root, sorted.
  std::vector<VarKey> support(Id root) const {
    std::vector<char> seen(nodes_.size(), 0);
    std::vector<VarKey> out;
    collect_support(root, seen, out);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

 private:
  struct Key {
    NodeKind kind;
    double value;
    int index, a, b;
    friend bool operator<(const Key& l, const Key& r) {
      return std::tie(l.kind, l.value, l.index, l.a, l.b) <
             std::tie(r.kind, r.value, r.index, r.a, r.b);
    }
  };

  bool is_const(Id id) const { return node(id).kind == NodeKind::Constant; }
  bool is_zero(Id id) const { return is_const(id) && node(id).value == 0.0; }
  bool is_one(Id id) const { return is_const(id) && node(id).value == 1.0; }

  Id intern(Node n) {
    Key key{n.kind, n.value, n.index, n.a, n.b};
    if (auto it = table_.find(key); it != table_.end()) return it->second;
    Id id = static_cast<Id>(nodes_.size());
    nodes_.push_back(n);
    table_.emplace(key, id);
    return id;
  }

  void collect_support(Id id, std::vector<char>& seen, std::vector<VarKey>& out) const {
    if (seen[static_cast<std::size_t>(id)]) return;
    seen[static_cast<std::size_t>(id)] = 1;
    const Node& n = node(id);
    switch (n.kind) {
      case NodeKind::StateRef:
      case NodeKind::ParamRef:
      case NodeKind::VarRef:
        out.push_back({n.kind, n.index});
        break;
      default:
        if (n.a >= 0) collect_support(n.a, seen, out);
        if (n.b >= 0) collect_support(n.b, seen, out);
    }
  }

  std::vector<Node> nodes_;
  std::map<Key, Id> table_;
  std::map<std::pair<Id, VarKey>, Id> diff_memo_;
};

// ---------------------------------------------------------------------------
// Symbol tables and parsing

struct SymbolTable {
  std::map<std::string, VarKey> by_name;   // "t" handled separately
  std::vector<std::string> state_names;
  std::vector<std::string> param_names;

  static SymbolTable for_problem(const std::vector<std::string>& states,
                                 const std::vector<std::string>& params) {
    SymbolTable st;
    st.state_names = states;
    st.param_names = params;
    for (std::size_t i = 0; i < states.size(); ++i)
      st.by_name[states[i]] = {NodeKind::StateRef, static_cast<int>(i)};
    for (std::size_t i = 0; i < params.size(); ++i)
      st.by_name[params[i]] = {NodeKind::ParamRef, static_cast<int>(i)};
    return st;
  }

  std::string name_of(const VarKey& k) const {
    if (k.kind == NodeKind::StateRef) return state_names.at(static_cast<std::size_t>(k.index));
    if (k.kind == NodeKind::ParamRef) return param_names.at(static_cast<std::size_t>(k.index));
    throw std::out_of_range("symbol table has no name for this reference");
  }
};

namespace detail {

class Parser {
 public:
  Parser(std::string_view src, ExprDag& dag, const SymbolTable& symbols,
         const std::unordered_map<std::string, int>* flat_vars = nullptr)
      : src_(src), dag_(dag), symbols_(symbols), flat_vars_(flat_vars) {}

  ExprDag::Id parse() {
    ExprDag::Id e = expression();
    skip_ws();
    if (pos_ != src_.size()) throw ParseError("unexpected trailing input", pos_);
    return e;
  }

 private:
  ExprDag::Id expression() {
    ExprDag::Id e = term();
    for (;;) {
      skip_ws();
      if (match('+')) e = dag_.add(e, term());
      else if (match('-')) e = dag_.sub(e, term());
      else return e;
    }
  }

  ExprDag::Id term() {
    ExprDag::Id e = unary();
    for (;;) {
      skip_ws();
      if (match('*')) e = dag_.mul(e, unary());
      else if (match('/')) e = dag_.div(e, unary());
      else return e;
    }
  }

  ExprDag::Id unary() {
    skip_ws();
    if (match('-')) return dag_.neg(unary());
    return power();
  }

  ExprDag::Id power() {
    ExprDag::Id base = atom();
    skip_ws();
    if (match('^')) {
      skip_ws();
      std::size_t at = pos_;
      double v = number();
      double ip;
      if (std::modf(v, &ip) != 0.0 || v < 1.0)
        throw ParseError("exponent must be an integer constant >= 1", at);
      return dag_.pow(base, static_cast<int>(ip));
    }
    return base;
  }

  ExprDag::Id atom() {
    skip_ws();
    if (pos_ >= src_.size()) throw ParseError("unexpected end of input", pos_);
    char c = src_[pos_];
    if (c == '(') {
      ++pos_;
      ExprDag::Id e = expression();
      skip_ws();
      if (!match(')')) throw ParseError("expected ')'", pos_);
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.')
      return dag_.constant(number());
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t at = pos_;
      std::string id = identifier();
      if (id == "t") return dag_.time();
      if (flat_vars_) {
        auto it = flat_vars_->find(id);
        if (it != flat_vars_->end()) return dag_.var(it->second);
      }
      auto it = symbols_.by_name.find(id);
      if (it == symbols_.by_name.end())
        throw ParseError("unknown identifier '" + id + "'", at);
      const VarKey& k = it->second;
      return k.kind == NodeKind::StateRef ? dag_.state(k.index) : dag_.param(k.index);
    }
    throw ParseError(std::string("unexpected character '") + c + "'", pos_);
  }

  double number() {
    std::size_t at = pos_;
    std::size_t n = 0;
    double v;
    try {
      v = std::stod(std::string(src_.substr(pos_)), &n);
    } catch (const std::exception&) {
      throw ParseError("malformed number", at);
    }
    pos_ += n;
    return v;
  }

  std::string identifier() {
    std::size_t start = pos_;
    while (pos_ < src_.size() &&
           (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_'))
      ++pos_;
    return std::string(src_.substr(start, pos_ - start));
  }

  void skip_ws() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
  }
  bool match(char c) {
    if (pos_ < src_.size() && src_[pos_] == c) { ++pos_; return true; }
    return false;
  }

  std::string_view src_;
  std::size_t pos_ = 0;
  ExprDag& dag_;
  const SymbolTable& symbols_;
  const std::unordered_map<std::string, int>* flat_vars_;
};

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline ExprDag::Id parse(std::string_view source, ExprDag& dag, const SymbolTable& symbols) {
  return detail::Parser(source, dag, symbols).parse();
}

/// Parse where identifiers may also name flat NLP variables.
inline ExprDag::Id parse_flat(std::string_view source, ExprDag& dag,
                              const SymbolTable& symbols,
                              const std::unordered_map<std::string, int>& flat_vars) {
  return detail::Parser(source, dag, symbols, &flat_vars).parse();
}

/// Fully parenthesized infix rendering; parse(render(e)) is
/// evaluation-equivalent to e. `flat_name` names VarRef nodes when present.
inline std::string render(const ExprDag& dag, ExprDag::Id root, const SymbolTable& symbols,
                          const std::function<std::string(int)>* flat_name = nullptr) {
  const Node& n = dag.node(root);
  auto rec = [&](ExprDag::Id id) { return render(dag, id, symbols, flat_name); };
  switch (n.kind) {
    case NodeKind::Constant: {
      std::string s = detail::format_number(n.value);
      return n.value < 0 ? "(" + s + ")" : s;
    }
    case NodeKind::Time: return "t";
    case NodeKind::StateRef:
    case NodeKind::ParamRef:
      return symbols.name_of({n.kind, n.index});
    case NodeKind::VarRef:
      if (!flat_name) throw std::out_of_range("no naming for flat variable");
      return (*flat_name)(n.index);
    case NodeKind::Neg: return "(-" + rec(n.a) + ")";
    case NodeKind::Add: return "(" + rec(n.a) + "+" + rec(n.b) + ")";
    case NodeKind::Sub: return "(" + rec(n.a) + "-" + rec(n.b) + ")";
    case NodeKind::Mul: return "(" + rec(n.a) + "*" + rec(n.b) + ")";
    case NodeKind::Div: return "(" + rec(n.a) + "/" + rec(n.b) + ")";
    case NodeKind::Pow: return "(" + rec(n.a) + "^" + std::to_string(n.index) + ")";
  }
  throw std::logic_error("corrupt node kind");
}

}  // namespace odefit
