#include "xfrn/error.hpp"

namespace xfrn {

int Error::exit_code() const noexcept {
  switch (kind_) {
    case Kind::config: return 2;
    case Kind::data: return 3;
    case Kind::model: return 4;
  }
  return 1;
}

}  // namespace xfrn
